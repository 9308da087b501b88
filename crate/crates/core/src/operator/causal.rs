use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LinearCausalKernel, Sequence};
use crate::error::{check_dim, Result, SlsError};

/// Whether the component at time `t` may depend on the current input `x_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Causality {
    Causal,
    StrictlyCausal,
}

impl Causality {
    pub fn is_strict(self) -> bool {
        self == Causality::StrictlyCausal
    }
}

/// A causal operator given through its component functions `A_t(x_{t:0})`.
///
/// `history` always holds `x_0, …, x_t` in chronological order, so the
/// current time is `history.len() - 1`.
pub trait CausalMap: Send + Sync {
    fn in_dim(&self) -> usize;

    fn out_dim(&self) -> usize;

    fn causality(&self) -> Causality {
        Causality::Causal
    }

    /// Last time index the map is defined for; `None` when unbounded.
    fn horizon(&self) -> Option<usize> {
        None
    }

    fn component(&self, history: &[DVector<f64>]) -> DVector<f64>;

    /// Outputs for every prefix of `input`. Override when a forward recursion
    /// is cheaper than re-evaluating each prefix.
    fn evaluate_all(&self, input: &[DVector<f64>]) -> Vec<DVector<f64>> {
        (1..=input.len()).map(|l| self.component(&input[..l])).collect()
    }
}

/// Shared handle to a causal operator with the operator algebra on top.
#[derive(Clone)]
pub struct Operator {
    map: Arc<dyn CausalMap>,
}

impl fmt::Debug for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Operator")
            .field("in_dim", &self.in_dim())
            .field("out_dim", &self.out_dim())
            .field("causality", &self.causality())
            .field("horizon", &self.horizon())
            .finish()
    }
}

impl Operator {
    pub fn new(map: impl CausalMap + 'static) -> Self {
        Self { map: Arc::new(map) }
    }

    pub fn from_arc(map: Arc<dyn CausalMap>) -> Self {
        Self { map }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(Identity { dim })
    }

    pub fn zero(in_dim: usize, out_dim: usize) -> Self {
        Self::new(Zero { in_dim, out_dim })
    }

    /// `A_t(x_{t:0}) = x_{t-steps}`, zero before `steps`.
    pub fn delay(dim: usize, steps: usize) -> Self {
        Self::new(Delay { dim, steps })
    }

    /// Callback-backed operator. The declared causality is trusted; use
    /// [`Operator::check_strictly_causal`] to spot-check it.
    pub fn from_fn<F>(in_dim: usize, out_dim: usize, causality: Causality, f: F) -> Self
    where
        F: Fn(&[DVector<f64>]) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::new(FnMap {
            in_dim,
            out_dim,
            causality,
            f: Box::new(f),
        })
    }

    /// Memoryless operator `A_t(x_{t:0}) = f(t, x_t)`.
    pub fn pointwise<F>(in_dim: usize, out_dim: usize, f: F) -> Self
    where
        F: Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::new(Pointwise {
            in_dim,
            out_dim,
            f: Box::new(f),
        })
    }

    pub fn linear(kernel: LinearCausalKernel) -> Self {
        Self::new(Affine { kernel, offset: None })
    }

    /// `A_t(x_{t:0}) = Σ_k K_{t,k} x_{t+1-k} + offset_t`.
    pub fn affine(kernel: LinearCausalKernel, offset: Sequence) -> Result<Self> {
        check_dim("Operator::affine offset", kernel.out_dim(), offset.dim())?;
        if offset.horizon() < kernel.horizon() {
            return Err(SlsError::HorizonMismatch {
                context: "Operator::affine offset",
                expected: kernel.horizon(),
                actual: offset.horizon(),
            });
        }
        Ok(Self::new(Affine {
            kernel,
            offset: Some(offset),
        }))
    }

    pub fn in_dim(&self) -> usize {
        self.map.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.map.out_dim()
    }

    pub fn causality(&self) -> Causality {
        self.map.causality()
    }

    pub fn horizon(&self) -> Option<usize> {
        self.map.horizon()
    }

    pub fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        self.map.component(history)
    }

    pub fn evaluate_values(&self, input: &[DVector<f64>]) -> Vec<DVector<f64>> {
        self.map.evaluate_all(input)
    }

    pub fn evaluate(&self, input: &Sequence) -> Result<Sequence> {
        check_dim("Operator::evaluate", self.in_dim(), input.dim())?;
        self.check_horizon("Operator::evaluate", input.horizon())?;
        Sequence::new(self.out_dim(), self.map.evaluate_all(input.values()))
    }

    pub(crate) fn check_horizon(&self, context: &'static str, t: usize) -> Result<()> {
        match self.horizon() {
            Some(h) if t > h => Err(SlsError::HorizonMismatch {
                context,
                expected: h,
                actual: t,
            }),
            _ => Ok(()),
        }
    }

    /// `self ∘ inner`, i.e. `x ↦ self(inner(x))`.
    pub fn compose(&self, inner: &Operator) -> Result<Operator> {
        check_dim("Operator::compose", self.in_dim(), inner.out_dim())?;
        Ok(Self::new(Compose {
            outer: self.clone(),
            inner: inner.clone(),
        }))
    }

    pub fn add(&self, other: &Operator) -> Result<Operator> {
        check_dim("Operator::add (input)", self.in_dim(), other.in_dim())?;
        check_dim("Operator::add (output)", self.out_dim(), other.out_dim())?;
        Ok(Self::new(Sum {
            terms: vec![(1.0, self.clone()), (1.0, other.clone())],
        }))
    }

    pub fn sub(&self, other: &Operator) -> Result<Operator> {
        check_dim("Operator::sub (input)", self.in_dim(), other.in_dim())?;
        check_dim("Operator::sub (output)", self.out_dim(), other.out_dim())?;
        Ok(Self::new(Sum {
            terms: vec![(1.0, self.clone()), (-1.0, other.clone())],
        }))
    }

    pub fn scale(&self, c: f64) -> Operator {
        Self::new(Sum {
            terms: vec![(c, self.clone())],
        })
    }

    /// Causal inverse by the forward recursion `b_t = a_t − A_t(0, b_{t−1:0})`.
    ///
    /// Requires `self − I` strictly causal, which is spot-checked by sampling.
    pub fn inverse(&self) -> Result<Operator> {
        check_dim("Operator::inverse", self.in_dim(), self.out_dim())?;
        self.check_identity_plus_strict(32, 0x5eed)?;
        Ok(Self::new(Inverse { op: self.clone() }))
    }

    /// Randomized check that `A_t(x_t, x_{t−1:0}) = A_t(0, x_{t−1:0})`.
    pub fn check_strictly_causal(&self, samples: usize, seed: u64) -> Result<()> {
        let dev = self.strictness_deviation(samples, seed, false);
        if dev <= STRICTNESS_TOL {
            Ok(())
        } else {
            Err(SlsError::NotStrictlyCausal {
                context: "operator",
                deviation: dev,
            })
        }
    }

    /// Randomized check that `A − I` is strictly causal.
    pub fn check_identity_plus_strict(&self, samples: usize, seed: u64) -> Result<()> {
        check_dim("identity-plus-strict check", self.in_dim(), self.out_dim())?;
        let dev = self.strictness_deviation(samples, seed, true);
        if dev <= STRICTNESS_TOL {
            Ok(())
        } else {
            Err(SlsError::NotStrictlyCausal {
                context: "operator minus identity",
                deviation: dev,
            })
        }
    }

    fn strictness_deviation(&self, samples: usize, seed: u64, minus_identity: bool) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.in_dim();
        let max_len = self.horizon().map_or(12, |h| (h + 1).min(12));
        let mut worst = 0.0_f64;
        for _ in 0..samples {
            let len = rng.random_range(1..=max_len);
            let mut hist: Vec<DVector<f64>> = (0..len)
                .map(|_| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let current = hist[len - 1].clone();
            let with_input = self.component(&hist);
            hist[len - 1].fill(0.0);
            let without = self.component(&hist);
            let diff = if minus_identity {
                (&with_input - &current) - &without
            } else {
                &with_input - &without
            };
            let scale = 1.0 + with_input.amax() + without.amax();
            worst = worst.max(diff.amax() / scale);
        }
        worst
    }
}

const STRICTNESS_TOL: f64 = 1e-12;

struct Identity {
    dim: usize,
}

impl CausalMap for Identity {
    fn in_dim(&self) -> usize {
        self.dim
    }
    fn out_dim(&self) -> usize {
        self.dim
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        history[history.len() - 1].clone()
    }
    fn evaluate_all(&self, input: &[DVector<f64>]) -> Vec<DVector<f64>> {
        input.to_vec()
    }
}

struct Zero {
    in_dim: usize,
    out_dim: usize,
}

impl CausalMap for Zero {
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn causality(&self) -> Causality {
        Causality::StrictlyCausal
    }
    fn component(&self, _history: &[DVector<f64>]) -> DVector<f64> {
        DVector::zeros(self.out_dim)
    }
}

struct Delay {
    dim: usize,
    steps: usize,
}

impl CausalMap for Delay {
    fn in_dim(&self) -> usize {
        self.dim
    }
    fn out_dim(&self) -> usize {
        self.dim
    }
    fn causality(&self) -> Causality {
        if self.steps == 0 {
            Causality::Causal
        } else {
            Causality::StrictlyCausal
        }
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let t = history.len() - 1;
        if t >= self.steps {
            history[t - self.steps].clone()
        } else {
            DVector::zeros(self.dim)
        }
    }
}

type HistoryFn = Box<dyn Fn(&[DVector<f64>]) -> DVector<f64> + Send + Sync>;

struct FnMap {
    in_dim: usize,
    out_dim: usize,
    causality: Causality,
    f: HistoryFn,
}

impl CausalMap for FnMap {
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn causality(&self) -> Causality {
        self.causality
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        (self.f)(history)
    }
}

type PointFn = Box<dyn Fn(usize, &DVector<f64>) -> DVector<f64> + Send + Sync>;

struct Pointwise {
    in_dim: usize,
    out_dim: usize,
    f: PointFn,
}

impl CausalMap for Pointwise {
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let t = history.len() - 1;
        (self.f)(t, &history[t])
    }
    fn evaluate_all(&self, input: &[DVector<f64>]) -> Vec<DVector<f64>> {
        input.iter().enumerate().map(|(t, x)| (self.f)(t, x)).collect()
    }
}

struct Affine {
    kernel: LinearCausalKernel,
    offset: Option<Sequence>,
}

impl CausalMap for Affine {
    fn in_dim(&self) -> usize {
        self.kernel.in_dim()
    }
    fn out_dim(&self) -> usize {
        self.kernel.out_dim()
    }
    fn causality(&self) -> Causality {
        if self.kernel.is_strictly_causal() {
            Causality::StrictlyCausal
        } else {
            Causality::Causal
        }
    }
    fn horizon(&self) -> Option<usize> {
        Some(self.kernel.horizon())
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let t = history.len() - 1;
        let mut out = self.kernel.apply_at(history);
        if let Some(r) = &self.offset {
            out += &r[t];
        }
        out
    }
}

struct Compose {
    outer: Operator,
    inner: Operator,
}

impl CausalMap for Compose {
    fn in_dim(&self) -> usize {
        self.inner.in_dim()
    }
    fn out_dim(&self) -> usize {
        self.outer.out_dim()
    }
    fn causality(&self) -> Causality {
        if self.outer.causality().is_strict() || self.inner.causality().is_strict() {
            Causality::StrictlyCausal
        } else {
            Causality::Causal
        }
    }
    fn horizon(&self) -> Option<usize> {
        min_horizon(self.outer.horizon(), self.inner.horizon())
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let mid = self.inner.evaluate_values(history);
        self.outer.component(&mid)
    }
    fn evaluate_all(&self, input: &[DVector<f64>]) -> Vec<DVector<f64>> {
        self.outer.evaluate_values(&self.inner.evaluate_values(input))
    }
}

struct Sum {
    terms: Vec<(f64, Operator)>,
}

impl CausalMap for Sum {
    fn in_dim(&self) -> usize {
        self.terms[0].1.in_dim()
    }
    fn out_dim(&self) -> usize {
        self.terms[0].1.out_dim()
    }
    fn causality(&self) -> Causality {
        if self.terms.iter().all(|(c, op)| *c == 0.0 || op.causality().is_strict()) {
            Causality::StrictlyCausal
        } else {
            Causality::Causal
        }
    }
    fn horizon(&self) -> Option<usize> {
        self.terms
            .iter()
            .fold(None, |acc, (_, op)| min_horizon(acc, op.horizon()))
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.out_dim());
        for (c, op) in &self.terms {
            out.axpy(*c, &op.component(history), 1.0);
        }
        out
    }
    fn evaluate_all(&self, input: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::zeros(self.out_dim()); input.len()];
        for (c, op) in &self.terms {
            for (acc, y) in out.iter_mut().zip(op.evaluate_values(input)) {
                acc.axpy(*c, &y, 1.0);
            }
        }
        out
    }
}

struct Inverse {
    op: Operator,
}

impl CausalMap for Inverse {
    fn in_dim(&self) -> usize {
        self.op.out_dim()
    }
    fn out_dim(&self) -> usize {
        self.op.in_dim()
    }
    fn horizon(&self) -> Option<usize> {
        self.op.horizon()
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        self.evaluate_all(history).pop().expect("non-empty history")
    }
    fn evaluate_all(&self, input: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.op.in_dim();
        let mut b: Vec<DVector<f64>> = Vec::with_capacity(input.len());
        for a in input {
            b.push(DVector::zeros(n));
            let free = self.op.component(&b);
            *b.last_mut().expect("just pushed") = a - free;
        }
        b
    }
}

fn min_horizon(a: Option<usize>, b: Option<usize>) -> Option<usize> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}
