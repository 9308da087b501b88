//! Plants, closed-loop maps, the CLM equation and realizing controllers.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, SlsError};
use crate::operator::io::{read_kernel_csv, read_sequence_csv, write_kernel_csv, write_sequence_csv};
use crate::operator::{CausalMap, Causality, LinearCausalKernel, Operator, Sequence};

/// Component functions `f_t(x_{t−1:0}, u_{t−1:0})` of a strictly causal plant.
pub trait PlantDynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// `f_t` for `t = x_past.len() ≥ 1`; both slices hold times `0..t`.
    fn next_state(&self, x_past: &[DVector<f64>], u_past: &[DVector<f64>]) -> DVector<f64>;
}

#[derive(Clone, Debug)]
enum Structure {
    Nonlinear,
    Lti {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
    },
    Linear {
        fx: LinearCausalKernel,
        fu: LinearCausalKernel,
    },
}

/// The system `x = F(x, u) + w` with `F` strictly causal and `F_0 ≡ 0`.
#[derive(Clone)]
pub struct Plant {
    dynamics: Arc<dyn PlantDynamics>,
    structure: Structure,
}

impl std::fmt::Debug for Plant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Plant")
            .field("n", &self.state_dim())
            .field("m", &self.input_dim())
            .field("structure", &self.structure)
            .finish()
    }
}

struct LtiDynamics {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl PlantDynamics for LtiDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn next_state(&self, x_past: &[DVector<f64>], u_past: &[DVector<f64>]) -> DVector<f64> {
        let t = x_past.len();
        &self.a * &x_past[t - 1] + &self.b * &u_past[t - 1]
    }
}

struct KernelDynamics {
    fx: LinearCausalKernel,
    fu: LinearCausalKernel,
}

impl PlantDynamics for KernelDynamics {
    fn state_dim(&self) -> usize {
        self.fx.out_dim()
    }
    fn input_dim(&self) -> usize {
        self.fu.in_dim()
    }
    fn next_state(&self, x_past: &[DVector<f64>], u_past: &[DVector<f64>]) -> DVector<f64> {
        // The k = 1 blocks are zero, so the current (unknown) values never matter.
        let t = x_past.len();
        let mut out = DVector::zeros(self.fx.out_dim());
        for k in 2..=self.fx.lags_at(t) {
            out.gemv(1.0, self.fx.block(t, k).expect("in support"), &x_past[t + 1 - k], 1.0);
        }
        for k in 2..=self.fu.lags_at(t) {
            out.gemv(1.0, self.fu.block(t, k).expect("in support"), &u_past[t + 1 - k], 1.0);
        }
        out
    }
}

type StepFn = Box<dyn Fn(&[DVector<f64>], &[DVector<f64>]) -> DVector<f64> + Send + Sync>;

struct FnDynamics {
    n: usize,
    m: usize,
    f: StepFn,
}

impl PlantDynamics for FnDynamics {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn next_state(&self, x_past: &[DVector<f64>], u_past: &[DVector<f64>]) -> DVector<f64> {
        (self.f)(x_past, u_past)
    }
}

impl Plant {
    /// `x_t = A x_{t−1} + B u_{t−1} + w_t`.
    pub fn lti(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(SlsError::InvalidArgument("A must be square".into()));
        }
        check_dim("Plant::lti (rows of B)", a.nrows(), b.nrows())?;
        Ok(Self {
            dynamics: Arc::new(LtiDynamics {
                a: a.clone(),
                b: b.clone(),
            }),
            structure: Structure::Lti { a, b },
        })
    }

    /// Linear time-varying plant from kernels with zero leading blocks.
    pub fn linear(fx: LinearCausalKernel, fu: LinearCausalKernel) -> Result<Self> {
        check_dim("Plant::linear (Fx square)", fx.out_dim(), fx.in_dim())?;
        check_dim("Plant::linear (Fu rows)", fx.out_dim(), fu.out_dim())?;
        if !fx.is_strictly_causal() || !fu.is_strictly_causal() {
            return Err(SlsError::NotStrictlyCausal {
                context: "linear plant kernels",
                deviation: fx.block_or_zero(0, 1).amax().max(fu.block_or_zero(0, 1).amax()),
            });
        }
        Ok(Self {
            dynamics: Arc::new(KernelDynamics {
                fx: fx.clone(),
                fu: fu.clone(),
            }),
            structure: Structure::Linear { fx, fu },
        })
    }

    /// General nonlinear plant. `f(x_past, u_past)` receives the histories up
    /// to time `t − 1` and must be defined for every input.
    pub fn nonlinear<F>(n: usize, m: usize, f: F) -> Self
    where
        F: Fn(&[DVector<f64>], &[DVector<f64>]) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::from_dynamics(FnDynamics { n, m, f: Box::new(f) })
    }

    pub fn from_dynamics(dynamics: impl PlantDynamics + 'static) -> Self {
        Self {
            dynamics: Arc::new(dynamics),
            structure: Structure::Nonlinear,
        }
    }

    /// `F ≡ 0`.
    pub fn zero(n: usize, m: usize) -> Self {
        Self::lti(DMatrix::zeros(n, n), DMatrix::zeros(n, m)).expect("consistent zero plant")
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn lti_matrices(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        match &self.structure {
            Structure::Lti { a, b } => Some((a, b)),
            _ => None,
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self.structure, Structure::Nonlinear)
    }

    /// Kernels `(Fˣ, Fᵘ)` over `0..=horizon` for linear plants.
    pub fn linear_kernels(&self, horizon: usize) -> Option<(LinearCausalKernel, LinearCausalKernel)> {
        match &self.structure {
            Structure::Nonlinear => None,
            Structure::Lti { a, b } => {
                let lagged = |m: &DMatrix<f64>| {
                    LinearCausalKernel::from_fn(m.nrows(), m.ncols(), horizon, Some(2), |_, k| {
                        if k == 2 {
                            m.clone()
                        } else {
                            DMatrix::zeros(m.nrows(), m.ncols())
                        }
                    })
                };
                Some((lagged(a), lagged(b)))
            }
            Structure::Linear { fx, fu } => {
                let h = horizon.min(fx.horizon()).min(fu.horizon());
                Some((fx.restrict(h), fu.restrict(h)))
            }
        }
    }

    /// `f_t(x_{t−1:0}, u_{t−1:0})` for `t ≥ 1`.
    pub fn next_state(&self, x_past: &[DVector<f64>], u_past: &[DVector<f64>]) -> DVector<f64> {
        self.dynamics.next_state(x_past, u_past)
    }

    /// `F(x, u)` as a sequence, with `F_0 = 0`.
    pub fn apply(&self, x: &Sequence, u: &Sequence) -> Result<Sequence> {
        check_dim("Plant::apply (state)", self.state_dim(), x.dim())?;
        check_dim("Plant::apply (input)", self.input_dim(), u.dim())?;
        if x.len() != u.len() {
            return Err(SlsError::HorizonMismatch {
                context: "Plant::apply",
                expected: x.horizon(),
                actual: u.horizon(),
            });
        }
        let n = self.state_dim();
        Ok(Sequence::from_fn(n, x.horizon(), |t| {
            if t == 0 {
                DVector::zeros(n)
            } else {
                self.next_state(&x.values()[..t], &u.values()[..t])
            }
        }))
    }

    /// `F` as an operator on the stacked space ℓ^{n+m}.
    pub fn as_operator(&self) -> Operator {
        Operator::new(StackedPlant { plant: self.clone() })
    }
}

struct StackedPlant {
    plant: Plant,
}

impl CausalMap for StackedPlant {
    fn in_dim(&self) -> usize {
        self.plant.state_dim() + self.plant.input_dim()
    }
    fn out_dim(&self) -> usize {
        self.plant.state_dim()
    }
    fn causality(&self) -> Causality {
        Causality::StrictlyCausal
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let t = history.len() - 1;
        let n = self.plant.state_dim();
        if t == 0 {
            return DVector::zeros(n);
        }
        let m = self.plant.input_dim();
        let xs: Vec<_> = history[..t].iter().map(|z| z.rows(0, n).into_owned()).collect();
        let us: Vec<_> = history[..t].iter().map(|z| z.rows(n, m).into_owned()).collect();
        self.plant.next_state(&xs, &us)
    }
}

/// Affine closed-loop map `Ψˣ(w) = R(w) + r`, `Ψᵘ(w) = M(w) + m` with `R_{t,1} = I`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineClm {
    pub r: LinearCausalKernel,
    pub m: LinearCausalKernel,
    pub r_offset: Sequence,
    pub m_offset: Sequence,
}

#[derive(Debug, Serialize, Deserialize)]
struct AffineClmHeader {
    n: usize,
    m: usize,
    horizon: usize,
    fir: Option<usize>,
    r_kernel: String,
    m_kernel: String,
    r_offset: String,
    m_offset: String,
}

impl AffineClm {
    /// Linear map (zero offsets).
    pub fn linear(r: LinearCausalKernel, m: LinearCausalKernel) -> Result<Self> {
        let h = r.horizon();
        let (n, mi) = (r.out_dim(), m.out_dim());
        Self::new(r, m, Sequence::zeros(n, h), Sequence::zeros(mi, h))
    }

    pub fn new(r: LinearCausalKernel, m: LinearCausalKernel, r_offset: Sequence, m_offset: Sequence) -> Result<Self> {
        let n = r.out_dim();
        check_dim("AffineClm (R square)", n, r.in_dim())?;
        check_dim("AffineClm (M input)", n, m.in_dim())?;
        check_dim("AffineClm (r offset)", n, r_offset.dim())?;
        check_dim("AffineClm (m offset)", m.out_dim(), m_offset.dim())?;
        for (ctx, h) in [
            ("AffineClm (M horizon)", m.horizon()),
            ("AffineClm (r horizon)", r_offset.horizon()),
            ("AffineClm (m horizon)", m_offset.horizon()),
        ] {
            if h != r.horizon() {
                return Err(SlsError::HorizonMismatch {
                    context: ctx,
                    expected: r.horizon(),
                    actual: h,
                });
            }
        }
        if !r.is_identity_leading(1e-12) {
            return Err(SlsError::NotStrictlyCausal {
                context: "R − I (leading blocks must be identity)",
                deviation: r
                    .iter_blocks()
                    .filter(|(_, k, _)| *k == 1)
                    .map(|(_, _, b)| (b - DMatrix::identity(n, n)).amax())
                    .fold(0.0, f64::max),
            });
        }
        Ok(Self {
            r,
            m,
            r_offset,
            m_offset,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.r.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.m.out_dim()
    }

    pub fn horizon(&self) -> usize {
        self.r.horizon()
    }

    pub fn fir(&self) -> Option<usize> {
        self.r.fir()
    }

    pub fn psi_x(&self) -> Operator {
        Operator::affine(self.r.clone(), self.r_offset.clone()).expect("validated at construction")
    }

    pub fn psi_u(&self) -> Operator {
        Operator::affine(self.m.clone(), self.m_offset.clone()).expect("validated at construction")
    }

    /// Writes `clm.json` plus four CSV files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let header = AffineClmHeader {
            n: self.state_dim(),
            m: self.input_dim(),
            horizon: self.horizon(),
            fir: self.fir(),
            r_kernel: "R.csv".into(),
            m_kernel: "M.csv".into(),
            r_offset: "r.csv".into(),
            m_offset: "m.csv".into(),
        };
        write_kernel_csv(&self.r, BufWriter::new(File::create(dir.join(&header.r_kernel))?))?;
        write_kernel_csv(&self.m, BufWriter::new(File::create(dir.join(&header.m_kernel))?))?;
        write_sequence_csv(
            &self.r_offset,
            BufWriter::new(File::create(dir.join(&header.r_offset))?),
        )?;
        write_sequence_csv(
            &self.m_offset,
            BufWriter::new(File::create(dir.join(&header.m_offset))?),
        )?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("clm.json"))?), &header)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: AffineClmHeader = serde_json::from_reader(BufReader::new(File::open(dir.join("clm.json"))?))?;
        let open = |name: &str| -> Result<BufReader<File>> { Ok(BufReader::new(File::open(dir.join(name))?)) };
        let r = read_kernel_csv(open(&header.r_kernel)?, header.fir)?;
        let m = read_kernel_csv(open(&header.m_kernel)?, header.fir)?;
        let r_offset = read_sequence_csv(open(&header.r_offset)?)?;
        let m_offset = read_sequence_csv(open(&header.m_offset)?)?;
        check_dim("AffineClm::load (n)", header.n, r.out_dim())?;
        check_dim("AffineClm::load (m)", header.m, m.out_dim())?;
        if r.horizon() != header.horizon {
            return Err(SlsError::HorizonMismatch {
                context: "AffineClm::load",
                expected: header.horizon,
                actual: r.horizon(),
            });
        }
        Self::new(r, m, r_offset, m_offset)
    }
}

/// A candidate closed-loop map `Ψ = (Ψˣ, Ψᵘ)` with `Ψˣ − I` strictly causal.
#[derive(Clone, Debug)]
pub struct ClmPair {
    pub psi_x: Operator,
    pub psi_u: Operator,
    affine: Option<AffineClm>,
}

impl ClmPair {
    pub fn new(psi_x: Operator, psi_u: Operator) -> Result<Self> {
        check_dim("ClmPair (Ψˣ square)", psi_x.in_dim(), psi_x.out_dim())?;
        check_dim("ClmPair (Ψᵘ input)", psi_x.in_dim(), psi_u.in_dim())?;
        psi_x.check_identity_plus_strict(24, 0xc1a)?;
        Ok(Self {
            psi_x,
            psi_u,
            affine: None,
        })
    }

    pub fn from_affine(clm: AffineClm) -> Self {
        Self {
            psi_x: clm.psi_x(),
            psi_u: clm.psi_u(),
            affine: Some(clm),
        }
    }

    pub fn affine(&self) -> Option<&AffineClm> {
        self.affine.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.psi_x.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.psi_u.out_dim()
    }

    /// `(Ψˣ(w), Ψᵘ(w))`.
    pub fn evaluate(&self, w: &Sequence) -> Result<(Sequence, Sequence)> {
        Ok((self.psi_x.evaluate(w)?, self.psi_u.evaluate(w)?))
    }
}

/// `Δ[F, Ψ](w) = F(Ψ(w)) + w − Ψˣ(w)`; zero iff the CLM equation holds along `w`.
pub fn clm_residual(plant: &Plant, psi: &ClmPair, w: &Sequence) -> Result<Sequence> {
    check_dim("clm_residual (state)", plant.state_dim(), psi.state_dim())?;
    check_dim("clm_residual (input)", plant.input_dim(), psi.input_dim())?;
    let (x, u) = psi.evaluate(w)?;
    plant.apply(&x, &u)?.add(w)?.sub(&x)
}

/// The residual `Δ[F, Ψ]` as an operator, for gain estimation.
pub fn residual_operator(plant: &Plant, psi: &ClmPair) -> Result<Operator> {
    check_dim("residual_operator (state)", plant.state_dim(), psi.state_dim())?;
    check_dim("residual_operator (input)", plant.input_dim(), psi.input_dim())?;
    Ok(Operator::new(Residual {
        plant: plant.clone(),
        psi: psi.clone(),
    }))
}

struct Residual {
    plant: Plant,
    psi: ClmPair,
}

impl CausalMap for Residual {
    fn in_dim(&self) -> usize {
        self.plant.state_dim()
    }
    fn out_dim(&self) -> usize {
        self.plant.state_dim()
    }
    fn causality(&self) -> Causality {
        Causality::StrictlyCausal
    }
    fn horizon(&self) -> Option<usize> {
        match (self.psi.psi_x.horizon(), self.psi.psi_u.horizon()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        self.evaluate_all(history).pop().expect("non-empty")
    }
    fn evaluate_all(&self, input: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let x = self.psi.psi_x.evaluate_values(input);
        let u = self.psi.psi_u.evaluate_values(input);
        (0..input.len())
            .map(|t| {
                let f = if t == 0 {
                    DVector::zeros(self.plant.state_dim())
                } else {
                    self.plant.next_state(&x[..t], &u[..t])
                };
                f + &input[t] - &x[t]
            })
            .collect()
    }
}

/// Completes `Ψᵘ` to a CLM: `Ψˣ_t(w) = f_t(Ψˣ_{t−1:0}, Ψᵘ_{t−1:0}) + w_t`.
///
/// `Ψˣ` is evaluated lazily by this forward recursion on each call.
pub fn complete_clm(plant: &Plant, psi_u: &Operator) -> Result<ClmPair> {
    check_dim("complete_clm (Ψᵘ input)", plant.state_dim(), psi_u.in_dim())?;
    check_dim("complete_clm (Ψᵘ output)", plant.input_dim(), psi_u.out_dim())?;
    let psi_x = Operator::new(CompletedState {
        plant: plant.clone(),
        psi_u: psi_u.clone(),
    });
    ClmPair::new(psi_x, psi_u.clone())
}

struct CompletedState {
    plant: Plant,
    psi_u: Operator,
}

impl CausalMap for CompletedState {
    fn in_dim(&self) -> usize {
        self.plant.state_dim()
    }
    fn out_dim(&self) -> usize {
        self.plant.state_dim()
    }
    fn horizon(&self) -> Option<usize> {
        self.psi_u.horizon()
    }
    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        self.evaluate_all(history).pop().expect("non-empty")
    }
    fn evaluate_all(&self, w: &[DVector<f64>]) -> Vec<DVector<f64>> {
        // Ψᵘ(w) does not depend on Ψˣ, so it is computed once up front.
        let u = self.psi_u.evaluate_values(w);
        let mut x: Vec<DVector<f64>> = Vec::with_capacity(w.len());
        for (t, wt) in w.iter().enumerate() {
            let next = if t == 0 {
                wt.clone()
            } else {
                self.plant.next_state(&x, &u[..t]) + wt
            };
            x.push(next);
        }
        x
    }
}

/// The unique realizing controller `K′ = Ψᵘ (Ψˣ)⁻¹`.
pub fn realize_controller(psi: &ClmPair) -> Result<Operator> {
    psi.psi_u.compose(&psi.psi_x.inverse()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_lti(a: f64, b: f64) -> Plant {
        Plant::lti(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b)).unwrap()
    }

    fn scalar_kernel(h: usize, fir: usize, f: impl Fn(usize) -> f64) -> LinearCausalKernel {
        LinearCausalKernel::from_fn(1, 1, h, Some(fir), |_, k| DMatrix::from_element(1, 1, f(k)))
    }

    fn deadbeat(a: f64, b: f64, h: usize) -> ClmPair {
        let r = scalar_kernel(h, 2, |k| if k == 1 { 1.0 } else { 0.0 });
        let m = scalar_kernel(h, 2, |k| if k == 1 { -a / b } else { 0.0 });
        ClmPair::from_affine(AffineClm::linear(r, m).unwrap())
    }

    fn random_w(seed: u64, dim: usize, h: usize) -> Sequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sequence::from_fn(dim, h, |_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn deadbeat_kernels_have_zero_residual() {
        let plant = scalar_lti(2.0, 1.0);
        let psi = deadbeat(2.0, 1.0, 10);
        for seed in 0..5 {
            let res = clm_residual(&plant, &psi, &random_w(seed, 1, 10)).unwrap();
            assert!(res.norm(crate::Norm::Inf, crate::Norm::Two) < 1e-14);
        }
    }

    #[test]
    fn open_loop_kernels_leave_growth_in_the_residual() {
        let plant = scalar_lti(2.0, 1.0);
        let r = scalar_kernel(4, 2, |k| if k == 1 { 1.0 } else { 0.0 });
        let m = scalar_kernel(4, 2, |_| 0.0);
        let psi = ClmPair::from_affine(AffineClm::linear(r, m).unwrap());
        let w = Sequence::impulse(4, 0, DVector::from_element(1, 1.0));
        let res = clm_residual(&plant, &psi, &w).unwrap();
        // Ψˣ(w) = w, so Δ = F(w, 0) = (0, 2, 0, …); the excess shows one step after the impulse
        assert_eq!(res, Sequence::from_scalars(&[0.0, 2.0, 0.0, 0.0, 0.0]));
        // the same kernels at an impulse one step later: the residual entry at t = 2 equals 2
        let w1 = Sequence::impulse(4, 1, DVector::from_element(1, 1.0));
        assert_eq!(clm_residual(&plant, &psi, &w1).unwrap()[2][0], 2.0);
    }

    #[test]
    fn completion_examples() {
        let impulse = Sequence::impulse(5, 0, DVector::from_element(1, 1.0));

        let plant = scalar_lti(0.5, 1.0);
        let psi = complete_clm(&plant, &Operator::zero(1, 1)).unwrap();
        let x = psi.psi_x.evaluate(&impulse).unwrap();
        assert_eq!(x, Sequence::from_scalars(&[1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]));

        let psi = complete_clm(&Plant::zero(2, 1), &Operator::zero(2, 1)).unwrap();
        let w = random_w(3, 2, 6);
        assert_eq!(psi.psi_x.evaluate(&w).unwrap(), w);

        let plant = scalar_lti(3.0, 2.0);
        let m = scalar_kernel(5, 1, |_| -1.5);
        let psi = complete_clm(&plant, &Operator::linear(m)).unwrap();
        let x = psi.psi_x.evaluate(&impulse).unwrap();
        assert_eq!(x, Sequence::from_scalars(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn completed_maps_satisfy_the_clm_equation() {
        let plant = Plant::nonlinear(2, 1, |x, u| {
            let t = x.len();
            let p = &x[t - 1];
            DVector::from_vec(vec![
                0.5 * p[1].sin() + u[t - 1][0],
                0.3 * p[0] - 0.1 * p[1] * p[1].tanh(),
            ])
        });
        let psi_u = Operator::from_fn(2, 1, Causality::Causal, |h| {
            let t = h.len() - 1;
            DVector::from_element(1, -0.4 * h[t][0] + if t > 0 { 0.2 * h[t - 1][1].cos() } else { 0.0 })
        });
        let psi = complete_clm(&plant, &psi_u).unwrap();
        for seed in 0..5 {
            let res = clm_residual(&plant, &psi, &random_w(seed, 2, 25)).unwrap();
            assert!(res.norm(crate::Norm::Inf, crate::Norm::Inf) < 1e-13);
        }
    }

    #[test]
    fn realizing_controller_identities() {
        let zero = ClmPair::new(Operator::identity(2), Operator::zero(2, 1)).unwrap();
        let k = realize_controller(&zero).unwrap();
        assert_eq!(k.evaluate(&random_w(1, 2, 5)).unwrap(), Sequence::zeros(1, 5));

        let plant = scalar_lti(1.0, 1.0);
        let psi = deadbeat(1.0, 1.0, 6);
        let k = realize_controller(&psi).unwrap();
        for seed in 0..5 {
            let w = random_w(seed, 1, 6);
            let (x, u) = psi.evaluate(&w).unwrap();
            assert!(k.evaluate(&x).unwrap().max_abs_diff(&u) < 1e-12);
            // deadbeat keeps x_t = w_t
            assert!(x.max_abs_diff(&w) < 1e-15);
            let _ = &plant;
        }
    }

    #[test]
    fn affine_and_generic_evaluation_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = LinearCausalKernel::from_fn(2, 2, 7, Some(3), |_, _| {
            DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0))
        });
        for t in 0..=7 {
            r.set_block(t, 1, DMatrix::identity(2, 2)).unwrap();
        }
        let m = LinearCausalKernel::from_fn(1, 2, 7, Some(3), |_, _| {
            DMatrix::from_fn(1, 2, |_, _| rng.random_range(-1.0..1.0))
        });
        let ro = random_w(8, 2, 7);
        let mo = random_w(9, 1, 7);
        let clm = AffineClm::new(r.clone(), m.clone(), ro.clone(), mo.clone()).unwrap();
        let w = random_w(10, 2, 7);
        let (x, u) = ClmPair::from_affine(clm).evaluate(&w).unwrap();
        let generic_x = Operator::from_fn(2, 2, Causality::Causal, move |h| r.apply_at(h) + &ro[h.len() - 1]);
        let generic_u = Operator::from_fn(2, 1, Causality::Causal, move |h| m.apply_at(h) + &mo[h.len() - 1]);
        assert!(generic_x.evaluate(&w).unwrap().max_abs_diff(&x) < 1e-15);
        assert!(generic_u.evaluate(&w).unwrap().max_abs_diff(&u) < 1e-15);
    }

    #[test]
    fn affine_requires_identity_leading_blocks() {
        let r = scalar_kernel(3, 2, |_| 0.5);
        let m = scalar_kernel(3, 2, |_| 0.0);
        assert!(AffineClm::linear(r, m).is_err());
    }

    #[test]
    fn affine_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let psi = deadbeat(2.0, 1.0, 4);
        let clm = psi.affine().unwrap().clone();
        clm.save(dir.path()).unwrap();
        assert_eq!(AffineClm::load(dir.path()).unwrap(), clm);
    }

    #[test]
    fn dimension_errors() {
        let plant = scalar_lti(1.0, 1.0);
        assert!(complete_clm(&plant, &Operator::zero(2, 1)).is_err());
        let psi = deadbeat(1.0, 1.0, 3);
        assert!(clm_residual(&Plant::zero(2, 1), &psi, &Sequence::zeros(2, 3)).is_err());
    }
}
