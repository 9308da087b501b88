//! Empirical incremental-gain estimation and small-gain bounds.

use std::fmt;
use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clm::{residual_operator, ClmPair, Plant};
use crate::error::{Result, SlsError};
use crate::operator::{LinearCausalKernel, Norm, Operator, Sequence};
use crate::runtime::simulate_perturbed;

/// How a certificate was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMethod {
    /// `γ = sup ‖Δa − Δa′‖ / ‖a − a′‖` over samples, `β = 0`.
    RatioSup,
    /// Least-squares slope, `β` lifted until every sample is enveloped.
    AffineFit,
    /// Exact induced ∞→∞ norm of a linear kernel.
    Exact,
}

/// Incremental gain envelope `‖A(a) − A(a′)‖_p ≤ γ‖a − a′‖_p + β` on the ball of radius `ρ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainCertificate {
    pub p: Norm,
    pub vec_norm: Norm,
    pub gamma: f64,
    pub beta: f64,
    /// `None` when the envelope is claimed on the whole space.
    pub rho: Option<f64>,
    pub sample_count: usize,
    pub seed: u64,
    pub method: GainMethod,
}

/// Certification status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Proved,
    EmpiricallyCertified,
    NotCertified,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Proved => "PROVED",
            Status::EmpiricallyCertified => "EMPIRICALLY CERTIFIED",
            Status::NotCertified => "NOT CERTIFIED",
        })
    }
}

impl GainCertificate {
    pub fn is_contractive(&self) -> bool {
        self.gamma < 1.0
    }

    pub fn status(&self) -> Status {
        match (self.is_contractive(), self.method) {
            (false, _) => Status::NotCertified,
            (true, GainMethod::Exact) => Status::Proved,
            (true, _) => Status::EmpiricallyCertified,
        }
    }

    /// Exact certificate for a linear kernel in the `(∞, ∞)` setting.
    pub fn exact_kernel(kernel: &LinearCausalKernel) -> Self {
        Self {
            p: Norm::Inf,
            vec_norm: Norm::Inf,
            gamma: kernel.induced_inf_gain(),
            beta: 0.0,
            rho: None,
            sample_count: 0,
            seed: 0,
            method: GainMethod::Exact,
        }
    }
}

/// Sampling setup for [`estimate_gain`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainEstimation {
    pub p: Norm,
    pub vec_norm: Norm,
    pub rho: f64,
    pub samples: usize,
    pub seed: u64,
    pub horizon: usize,
    pub method: GainMethod,
}

impl GainEstimation {
    pub fn new(p: Norm, rho: f64, samples: usize, seed: u64, horizon: usize) -> Self {
        Self {
            p,
            vec_norm: p,
            rho,
            samples,
            seed,
            horizon,
            method: GainMethod::RatioSup,
        }
    }
}

/// Sampled input pairs and the induced input and output distances.
fn sample_pairs(op: &Operator, cfg: &GainEstimation) -> Vec<(f64, f64)> {
    let n = op.in_dim();
    let h = cfg.horizon;
    let into_ball = |s: Sequence, r: f64| {
        let norm = s.norm(cfg.p, cfg.vec_norm);
        if norm > 0.0 {
            s.scale(r / norm)
        } else {
            s
        }
    };
    let mut pairs: Vec<(Sequence, Sequence)> = Vec::new();
    for i in 0..n {
        let dir = DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 });
        pairs.push((
            into_ball(Sequence::impulse(h, 0, dir.clone()), cfg.rho),
            Sequence::zeros(n, h),
        ));
        let constant = Sequence::from_fn(n, h, |_| dir.clone());
        pairs.push((into_ball(constant, cfg.rho), Sequence::zeros(n, h)));
    }
    let random: Vec<(Sequence, Sequence)> = (0..cfg.samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64 + 1);
            let draw = |rng: &mut ChaCha8Rng| {
                let g = Sequence::from_fn(n, h, |_| DVector::from_fn(n, |_, _| rng.sample(StandardNormal)));
                let r = cfg.rho * rng.random_range(0.0..=1.0_f64);
                into_ball(g, r)
            };
            let a = draw(&mut rng);
            let b = if k % 4 == 0 {
                Sequence::zeros(n, h)
            } else {
                draw(&mut rng)
            };
            (a, b)
        })
        .collect();
    pairs.extend(random);
    pairs
        .par_iter()
        .map(|(a, b)| {
            let ya = op.evaluate_values(a.values());
            let yb = op.evaluate_values(b.values());
            let dy = Sequence::new(op.out_dim(), ya.iter().zip(&yb).map(|(x, y)| x - y).collect())
                .expect("uniform output dimension");
            let din = a.sub(b).expect("same shape").norm(cfg.p, cfg.vec_norm);
            (din, dy.norm(cfg.p, cfg.vec_norm))
        })
        .collect()
}

/// Sampling-based gain envelope. The result under-estimates the true gain.
pub fn estimate_gain(op: &Operator, cfg: &GainEstimation) -> Result<GainCertificate> {
    if cfg.samples < 2 {
        return Err(SlsError::InvalidArgument(
            "estimate_gain needs at least 2 samples".into(),
        ));
    }
    if !(cfg.rho > 0.0) || !cfg.rho.is_finite() {
        return Err(SlsError::InvalidArgument(format!(
            "radius must be positive and finite, got {}",
            cfg.rho
        )));
    }
    if op.in_dim() != op.out_dim() {
        return Err(SlsError::DimensionMismatch {
            context: "estimate_gain",
            expected: op.in_dim(),
            actual: op.out_dim(),
        });
    }
    op.check_horizon("estimate_gain", cfg.horizon)?;
    let pairs = sample_pairs(op, cfg);
    let usable: Vec<(f64, f64)> = pairs.iter().copied().filter(|(d, _)| *d > f64::MIN_POSITIVE).collect();
    if pairs.iter().any(|(d, y)| !d.is_finite() || !y.is_finite()) {
        return Err(SlsError::NonFinite("operator output during gain estimation".into()));
    }
    let (gamma, beta) = match cfg.method {
        GainMethod::RatioSup | GainMethod::Exact => (usable.iter().map(|(d, y)| y / d).fold(0.0, f64::max), 0.0),
        GainMethod::AffineFit => affine_envelope(&pairs),
    };
    Ok(GainCertificate {
        p: cfg.p,
        vec_norm: cfg.vec_norm,
        gamma,
        beta,
        rho: Some(cfg.rho),
        sample_count: pairs.len(),
        seed: cfg.seed,
        method: cfg.method,
    })
}

fn affine_envelope(pairs: &[(f64, f64)]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let (sx, sy) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (sxy, sxx) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| {
        (a + (x - mx) * (y - my), b + (x - mx) * (x - mx))
    });
    let gamma = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
    let beta = pairs.iter().map(|(x, y)| y - gamma * x).fold(0.0, f64::max);
    (gamma, beta)
}

/// `(‖w‖ + β)/(1 − γ)`, or `None` when `γ ≥ 1` or the local hypothesis
/// `‖w‖ < (1 − γ)ρ − β` fails.
pub fn small_gain_bound(cert: &GainCertificate, w_norm: f64) -> Option<f64> {
    if !(cert.gamma < 1.0) || w_norm < 0.0 {
        return None;
    }
    if let Some(rho) = cert.rho {
        if !(w_norm < (1.0 - cert.gamma) * rho - cert.beta) {
            return None;
        }
    }
    Some((w_norm + cert.beta) / (1.0 - cert.gamma))
}

/// One perturbed run for [`certify_loop`].
#[derive(Clone, Debug)]
pub struct Trial {
    pub w: Sequence,
    pub v: Sequence,
    pub d: Sequence,
}

impl Trial {
    pub fn nominal(w: Sequence, input_dim: usize) -> Self {
        let h = w.horizon();
        let n = w.dim();
        Self {
            w,
            v: Sequence::zeros(n, h),
            d: Sequence::zeros(input_dim, h),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialVerdict {
    Pass,
    Fail,
    /// The bound's hypothesis does not hold for this trial.
    OutsideHypothesis,
}

#[derive(Clone, Debug)]
pub struct TrialReport {
    /// `‖ŵ‖_p`.
    pub w_hat_norm: f64,
    /// `‖ε‖_p` with `ŵ = Δ(ŵ) + ε`.
    pub eps_norm: f64,
    pub bound: Option<f64>,
    /// Running truncated norms are nondecreasing and below the bound.
    pub running_ok: bool,
    pub verdict: TrialVerdict,
}

impl TrialReport {
    pub fn margin(&self) -> Option<f64> {
        self.bound.map(|b| b - self.w_hat_norm)
    }
}

#[derive(Clone, Debug)]
pub struct LoopReport {
    pub certificate: GainCertificate,
    /// `‖Δ(0)‖_p`, added to `β` when bounding trajectories.
    pub offset: f64,
    pub trials: Vec<TrialReport>,
}

impl LoopReport {
    pub fn all_pass(&self) -> bool {
        self.trials.iter().all(|t| t.verdict == TrialVerdict::Pass)
    }

    pub fn failures(&self) -> usize {
        self.trials.iter().filter(|t| t.verdict == TrialVerdict::Fail).count()
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let c = &self.certificate;
        writeln!(out, "status: {}", c.status())?;
        writeln!(out, "method: {:?}", c.method)?;
        writeln!(out, "p: {}", c.p)?;
        writeln!(out, "vec_norm: {}", c.vec_norm)?;
        writeln!(out, "gamma: {:?}", c.gamma)?;
        writeln!(out, "beta: {:?}", c.beta)?;
        match c.rho {
            Some(r) => writeln!(out, "rho: {r:?}")?,
            None => writeln!(out, "rho: unbounded")?,
        }
        writeln!(out, "samples: {}", c.sample_count)?;
        writeln!(out, "seed: {}", c.seed)?;
        writeln!(out, "offset: {:?}", self.offset)?;
        writeln!(out, "trial,w_hat_norm,eps_norm,bound,margin,verdict")?;
        for (i, t) in self.trials.iter().enumerate() {
            let fmt_opt = |x: Option<f64>| x.map_or("infeasible".to_string(), |v| format!("{v:?}"));
            writeln!(
                out,
                "{i},{:?},{:?},{},{},{:?}",
                t.w_hat_norm,
                t.eps_norm,
                fmt_opt(t.bound),
                fmt_opt(t.margin()),
                t.verdict
            )?;
        }
        Ok(())
    }
}

const BOUND_TOL: f64 = 1e-9;

/// Simulates each trial and checks `‖ŵ‖_p` against the small-gain bound on
/// `ε = F(Ψ(ŵ) − (v, −d)) − F(Ψ(ŵ)) + w + v`.
pub fn certify_loop(plant: &Plant, psi: &ClmPair, cert: &GainCertificate, trials: &[Trial]) -> Result<LoopReport> {
    let delta = residual_operator(plant, psi)?;
    let (p, q) = (cert.p, cert.vec_norm);
    let mut offset = 0.0_f64;
    let mut reports = Vec::with_capacity(trials.len());
    for trial in trials {
        let tr = simulate_perturbed(plant, psi, &trial.w, &trial.v, &trial.d)?;
        let (px, pu) = psi.evaluate(&tr.w_hat)?;
        let f_nom = plant.apply(&px, &pu)?;
        let f_pert = plant.apply(&px.sub(&trial.v)?, &pu.add(&trial.d)?)?;
        let eps = f_pert.sub(&f_nom)?.add(&trial.w)?.add(&trial.v)?;
        let zero = Sequence::zeros(trial.w.dim(), trial.w.horizon());
        let off = delta.evaluate(&zero)?.norm(p, q);
        offset = offset.max(off);
        let w_hat_norm = tr.w_hat.norm(p, q);
        let eps_norm = eps.norm(p, q);
        let shifted = GainCertificate {
            beta: cert.beta + off,
            ..cert.clone()
        };
        let bound = small_gain_bound(&shifted, eps_norm);
        let running = tr.w_hat.running_norms(p, q);
        let monotone = running.windows(2).all(|w| w[1] >= w[0]);
        let (running_ok, verdict) = match bound {
            None => (monotone, TrialVerdict::OutsideHypothesis),
            Some(b) => {
                let tol = BOUND_TOL * b.max(1.0);
                let ok = monotone && running.iter().all(|s| *s <= b + tol);
                (ok, if ok { TrialVerdict::Pass } else { TrialVerdict::Fail })
            }
        };
        reports.push(TrialReport {
            w_hat_norm,
            eps_norm,
            bound,
            running_ok,
            verdict,
        });
    }
    Ok(LoopReport {
        certificate: cert.clone(),
        offset,
        trials: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clm::complete_clm;
    use nalgebra::DMatrix;

    fn cert(gamma: f64, beta: f64, rho: Option<f64>) -> GainCertificate {
        GainCertificate {
            p: Norm::Inf,
            vec_norm: Norm::Inf,
            gamma,
            beta,
            rho,
            sample_count: 0,
            seed: 0,
            method: GainMethod::RatioSup,
        }
    }

    #[test]
    fn zero_operator_has_zero_gain() {
        let c = estimate_gain(&Operator::zero(2, 2), &GainEstimation::new(Norm::Two, 1.0, 20, 1, 10)).unwrap();
        assert_eq!((c.gamma, c.beta), (0.0, 0.0));
        assert_eq!(c.status(), Status::EmpiricallyCertified);
    }

    #[test]
    fn scaled_delay_gain() {
        let op = Operator::delay(1, 1).scale(0.7);
        let c = estimate_gain(&op, &GainEstimation::new(Norm::Inf, 1.0, 100, 9, 30)).unwrap();
        assert!((0.69..=0.70 + 1e-12).contains(&c.gamma), "{}", c.gamma);
        for p in Norm::ALL {
            let mut cfg = GainEstimation::new(p, 2.0, 50, 3, 30);
            cfg.method = GainMethod::AffineFit;
            let c = estimate_gain(&op, &cfg).unwrap();
            assert!(c.gamma <= 0.7 + 1e-12 && c.beta <= 2.0 * 0.7 + 1e-12);
        }
    }

    #[test]
    fn exact_clm_residual_has_zero_gain() {
        let plant = Plant::lti(DMatrix::from_element(1, 1, 1.2), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let psi = complete_clm(&plant, &Operator::pointwise(1, 1, |_, x| x.map(|e| -0.5 * e.tanh()))).unwrap();
        let delta = residual_operator(&plant, &psi).unwrap();
        let c = estimate_gain(&delta, &GainEstimation::new(Norm::One, 1.0, 20, 2, 12)).unwrap();
        assert!(c.gamma < 1e-12 && c.beta == 0.0);
    }

    #[test]
    fn estimate_rejects_bad_arguments() {
        let op = Operator::identity(1);
        assert!(estimate_gain(&op, &GainEstimation::new(Norm::Inf, 1.0, 1, 0, 5)).is_err());
        assert!(estimate_gain(&op, &GainEstimation::new(Norm::Inf, 0.0, 10, 0, 5)).is_err());
    }

    #[test]
    fn bound_examples() {
        assert_eq!(small_gain_bound(&cert(0.5, 0.0, None), 1.0), Some(2.0));
        assert_eq!(small_gain_bound(&cert(0.0, 0.25, None), 3.0), Some(3.25));
        assert_eq!(small_gain_bound(&cert(0.9, 0.1, Some(10.0)), 1.1), None);
        assert!(small_gain_bound(&cert(0.9, 0.1, Some(10.0)), 0.8).is_some());
        assert_eq!(small_gain_bound(&cert(1.0, 0.0, None), 0.1), None);
    }

    #[test]
    fn bound_is_monotone() {
        let grid = [0.0, 0.1, 0.5, 0.9];
        for &g in &grid {
            for &b in &grid {
                let mut last = 0.0;
                for w in [0.0, 0.5, 1.0, 4.0] {
                    let x = small_gain_bound(&cert(g, b, None), w).unwrap();
                    assert!(x >= last);
                    assert!(small_gain_bound(&cert(g + 0.05, b, None), w).unwrap() >= x);
                    assert!(small_gain_bound(&cert(g, b + 0.05, None), w).unwrap() >= x);
                    last = x;
                }
            }
        }
    }

    #[test]
    fn certify_half_delay_residual() {
        // open loop on x+ = 0.5x + u with Ψ = (I, 0): Δ = 0.5·delay
        let plant = Plant::lti(DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let psi = ClmPair::new(Operator::identity(1), Operator::zero(1, 1)).unwrap();
        let delta = residual_operator(&plant, &psi).unwrap();
        let mut cfg = GainEstimation::new(Norm::One, 1.0, 50, 5, 40);
        cfg.vec_norm = Norm::One;
        let mut c = estimate_gain(&delta, &cfg).unwrap();
        assert!((c.gamma - 0.5).abs() < 1e-12);
        c.rho = None;
        let imp = Trial::nominal(Sequence::impulse(40, 0, DVector::from_element(1, 1.0)), 1);
        let report = certify_loop(&plant, &psi, &c, &[imp]).unwrap();
        let t = &report.trials[0];
        assert!(t.w_hat_norm <= 2.0 && t.w_hat_norm > 1.999);
        assert_eq!(t.verdict, TrialVerdict::Pass);
        let mut buf = Vec::new();
        report.write_text(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("status: EMPIRICALLY CERTIFIED"));
    }

    #[test]
    fn exact_clm_trials_pass_with_zero_gain() {
        let plant = Plant::lti(DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let psi = complete_clm(&plant, &Operator::pointwise(1, 1, |_, x| x * -2.0)).unwrap();
        let c = GainCertificate {
            rho: None,
            ..cert(0.0, 0.0, None)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = || Sequence::from_fn(1, 20, |_| DVector::from_element(1, rng.random_range(-1.0..1.0)));
        let trials: Vec<Trial> = (0..5).map(|_| Trial { w: s(), v: s(), d: s() }).collect();
        let report = certify_loop(&plant, &psi, &c, &trials).unwrap();
        assert!(report.all_pass());
        assert!(report
            .trials
            .iter()
            .all(|t| (t.w_hat_norm - t.eps_norm).abs() <= 1e-9 * t.eps_norm.max(1.0)));
    }

    #[test]
    fn exact_kernel_certificate() {
        let k = LinearCausalKernel::from_fn(1, 1, 10, Some(3), |_, j| {
            DMatrix::from_element(1, 1, if j == 2 { 0.4 } else { -0.3 })
        });
        let c = GainCertificate::exact_kernel(&k);
        assert!((c.gamma - 1.0).abs() < 1e-12);
        assert_eq!(c.status(), Status::NotCertified);
    }
}
