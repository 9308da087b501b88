use anyhow::Context;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sls_core::blend::{
    antiwindup_wrap, awp_bound, convergence_check, image_bounds, min_contraction_horizon, saturated_internal_dynamics,
    simulate_saturated, verify_containment, AwpOutcome, ConstraintSets, ConvexSet,
};
use sls_core::cartpole::{build_tracking_model, run_tracking_experiment, ReferenceTrajectory, TrackingNoise};
use sls_core::clm::{residual_operator, AffineClm, ClmPair, Plant};
use sls_core::ltv::{
    h2_cost, synthesize_h2_fir, synthesize_h2_fir_stacked, terminal_violation, verify_subspace, FirClm, LtvModel,
};
use sls_core::operator::io::read_sequence_csv;
use sls_core::runtime::{simulate_nominal, SlController};
use sls_core::stability::{
    certify_loop, estimate_gain, small_gain_bound, GainCertificate, GainEstimation, Status, Trial,
};
use sls_core::{LinearCausalKernel, Norm, Operator, Sequence};

use crate::config::{config_error, matrix, CertifyTarget, Disturbance, PlantConfig, RunConfig, SynthesisMethod};
use crate::output::{sci, OutDir, Report};

/// How a command that ran to completion ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Success,
    NotCertified,
}

struct Lti {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    horizon: usize,
}

fn lti(cfg: &RunConfig, command: &str) -> anyhow::Result<Lti> {
    match &cfg.plant {
        Some(PlantConfig::Lti { a, b, horizon }) => Ok(Lti {
            a: matrix("plant.a", a)?,
            b: matrix("plant.b", b)?,
            horizon: *horizon,
        }),
        Some(PlantConfig::CartPole { .. }) => Err(config_error(format!("{command} needs an `lti` plant"))),
        None => Err(config_error(format!("{command} needs a [plant] section"))),
    }
}

fn synthesize(model: &LtvModel, cfg: &RunConfig) -> anyhow::Result<FirClm> {
    let fir = cfg.synthesis.fir;
    Ok(match cfg.synthesis.method {
        SynthesisMethod::Decomposed => synthesize_h2_fir(model, fir)?,
        SynthesisMethod::Stacked => synthesize_h2_fir_stacked(model, fir)?,
    })
}

/// Loads `synthesis.kernels` when set, otherwise synthesizes against `model`.
fn obtain_clm(model: &LtvModel, cfg: &RunConfig) -> anyhow::Result<FirClm> {
    match &cfg.synthesis.kernels {
        Some(dir) => {
            let clm = AffineClm::load(dir).with_context(|| format!("loading CLM from {}", dir.display()))?;
            if clm.horizon() != model.horizon()
                || clm.state_dim() != model.state_dim()
                || clm.input_dim() != model.input_dim()
            {
                return Err(config_error(format!(
                    "CLM in {} has shape (n = {}, m = {}, H = {}); the plant needs ({}, {}, {})",
                    dir.display(),
                    clm.state_dim(),
                    clm.input_dim(),
                    clm.horizon(),
                    model.state_dim(),
                    model.input_dim(),
                    model.horizon()
                )));
            }
            Ok(clm)
        }
        None => synthesize(model, cfg),
    }
}

fn disturbance(d: &Disturbance, dim: usize, horizon: usize, seed: Option<u64>) -> anyhow::Result<Sequence> {
    let vector = |name: &str, v: &[f64]| -> anyhow::Result<DVector<f64>> {
        if v.len() != dim {
            return Err(config_error(format!(
                "disturbance {name} has length {}, state dimension is {dim}",
                v.len()
            )));
        }
        Ok(DVector::from_column_slice(v))
    };
    let rng = || {
        seed.map(ChaCha8Rng::seed_from_u64)
            .ok_or_else(|| config_error("random disturbance needs `seed` or --seed"))
    };
    Ok(match d {
        Disturbance::Zero => Sequence::zeros(dim, horizon),
        Disturbance::Gaussian { sigma } => {
            let mut rng = rng()?;
            Sequence::from_fn(dim, horizon, |_| {
                DVector::from_fn(dim, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
            })
        }
        Disturbance::Uniform { amplitude } => {
            let mut rng = rng()?;
            Sequence::from_fn(dim, horizon, |_| {
                DVector::from_fn(dim, |_, _| rng.random_range(-amplitude..=*amplitude))
            })
        }
        Disturbance::Impulse { at, value } => {
            if *at > horizon {
                return Err(config_error(format!(
                    "impulse at t = {at} is past the horizon {horizon}"
                )));
            }
            Sequence::impulse(horizon, *at, vector("value", value)?)
        }
        Disturbance::Constant { value } => {
            let v = vector("value", value)?;
            Sequence::from_fn(dim, horizon, |_| v.clone())
        }
        Disturbance::File { path } => {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let seq = read_sequence_csv(std::io::BufReader::new(file))?;
            if seq.dim() != dim || seq.horizon() != horizon {
                return Err(config_error(format!(
                    "{} holds a sequence of dimension {} and horizon {}; expected {dim} and {horizon}",
                    path.display(),
                    seq.dim(),
                    seq.horizon()
                )));
            }
            seq
        }
    })
}

fn save_clm(clm: &FirClm, out: &mut OutDir) -> anyhow::Result<()> {
    clm.save(&out.path("clm"))?;
    for f in ["clm.json", "R.csv", "M.csv", "r.csv", "m.csv"] {
        out.record(&format!("clm/{f}"));
    }
    Ok(())
}

fn synthesis_report(report: &mut Report, clm: &FirClm, model: &LtvModel, cfg: &RunConfig) -> anyhow::Result<()> {
    report.kv("state_dim", clm.state_dim());
    report.kv("input_dim", clm.input_dim());
    report.kv("horizon", clm.horizon());
    report.kv("fir", cfg.synthesis.fir);
    report.kv(
        "method",
        match (&cfg.synthesis.kernels, cfg.synthesis.method) {
            (Some(_), _) => "loaded",
            (None, SynthesisMethod::Decomposed) => "decomposed",
            (None, SynthesisMethod::Stacked) => "stacked",
        },
    );
    report.kv("subspace_residual", sci(verify_subspace(clm, model)?));
    report.kv("terminal_violation", sci(terminal_violation(clm)));
    report.kv("h2_cost", sci(h2_cost(clm)));
    Ok(())
}

struct CartPoleSetup {
    params: sls_core::cartpole::CartPoleParams,
    reference: ReferenceTrajectory,
    model: LtvModel,
    consistency: f64,
    options: sls_core::cartpole::TrackingOptions,
}

fn cartpole(cfg: &RunConfig, command: &str) -> anyhow::Result<CartPoleSetup> {
    let Some(PlantConfig::CartPole {
        params,
        reference,
        horizon,
        heuristic,
        tracking,
    }) = &cfg.plant
    else {
        return Err(config_error(format!("{command} needs a `cart_pole` plant")));
    };
    let reference = match reference {
        Some(path) => {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let r = ReferenceTrajectory::read_csv(std::io::BufReader::new(file))
                .with_context(|| format!("reading reference {}", path.display()))?;
            if let Some(h) = horizon {
                if *h != r.horizon() {
                    return Err(config_error(format!(
                        "plant.horizon = {h} but {} has horizon {}",
                        path.display(),
                        r.horizon()
                    )));
                }
            }
            r
        }
        None => ReferenceTrajectory::swing_up(params, horizon.expect("validated"), heuristic, true)?,
    };
    let tm = build_tracking_model(params, &reference, tracking.substeps)?;
    let consistency = tm.e.iter().map(|e| e.amax()).fold(0.0, f64::max);
    Ok(CartPoleSetup {
        params: *params,
        reference,
        model: tm.model,
        consistency,
        options: tracking.clone(),
    })
}

fn noise_is_random(n: &TrackingNoise) -> bool {
    n.sigma_w.iter().chain(&n.sigma_v).any(|s| *s != 0.0) || n.sigma_d != 0.0
}

pub fn synthesize_cmd(cfg: &RunConfig, out: &mut OutDir) -> anyhow::Result<Verdict> {
    let mut report = Report::default();
    report.line("# synthesize");
    match &cfg.plant {
        Some(PlantConfig::CartPole { .. }) => {
            let cp = cartpole(cfg, "synthesize")?;
            let clm = synthesize(&cp.model, cfg)?;
            report.kv("plant", "cart_pole");
            report.kv("tau_s", cp.params.tau_s);
            report.kv("reference_consistency", sci(cp.consistency));
            synthesis_report(&mut report, &clm, &cp.model, cfg)?;
            out.write("reference.csv", |w| Ok(cp.reference.write_csv(cp.params.tau_s, w)?))?;
            save_clm(&clm, out)?;
        }
        _ => {
            let p = lti(cfg, "synthesize")?;
            let model = LtvModel::time_invariant(p.a, p.b, p.horizon)?;
            let clm = synthesize(&model, cfg)?;
            report.kv("plant", "lti");
            synthesis_report(&mut report, &clm, &model, cfg)?;
            save_clm(&clm, out)?;
        }
    }
    report.save(out, "report.txt")?;
    Ok(Verdict::Success)
}

fn norms_report(report: &mut Report, name: &str, s: &Sequence, norms: &[Norm]) {
    for p in norms {
        report.kv(&format!("{name}_norm_{p}"), sci(s.norm(*p, *p)));
    }
}

pub fn simulate_cmd(cfg: &RunConfig, out: &mut OutDir) -> anyhow::Result<Verdict> {
    let mut report = Report::default();
    report.line("# simulate");
    if let Some(PlantConfig::CartPole { .. }) = &cfg.plant {
        tracking_run(cfg, out, &mut report, false)?;
    } else {
        let p = lti(cfg, "simulate")?;
        let model = LtvModel::time_invariant(p.a.clone(), p.b.clone(), p.horizon)?;
        let clm = obtain_clm(&model, cfg)?;
        let w = disturbance(&cfg.simulation.disturbance, p.a.nrows(), p.horizon, cfg.seed)?;
        let plant = Plant::lti(p.a, p.b)?;
        let psi = ClmPair::from_affine(clm);
        let trace = simulate_nominal(&plant, SlController::from_clm(&psi)?, &w)?;
        let (px, pu) = psi.evaluate(&w)?;
        report.kv("plant", "lti");
        report.kv("horizon", p.horizon);
        report.kv("finite", trace.x.is_finite() && trace.u.is_finite());
        report.kv("max_abs_x_minus_psi_x", sci(trace.x.max_abs_diff(&px)));
        report.kv("max_abs_u_minus_psi_u", sci(trace.u.max_abs_diff(&pu)));
        norms_report(&mut report, "w", &w, &cfg.p_norms);
        norms_report(&mut report, "w_hat", &trace.w_hat, &cfg.p_norms);
        out.write("trace.csv", |f| Ok(trace.write_csv(f)?))?;
    }
    report.save(out, "summary.txt")?;
    Ok(Verdict::Success)
}

/// Cart-pole tracking: synthesize (or load), run, and write the trace.
fn tracking_run(cfg: &RunConfig, out: &mut OutDir, report: &mut Report, write_clm: bool) -> anyhow::Result<()> {
    let cp = cartpole(cfg, "simulate")?;
    let clm = obtain_clm(&cp.model, cfg)?;
    let noise = &cfg.simulation.noise;
    let seed = if noise_is_random(noise) {
        cfg.require_seed("cart-pole noise")?
    } else {
        cfg.seed.unwrap_or(0)
    };
    let run = run_tracking_experiment(&cp.params, &cp.reference, &clm, noise, seed, &cp.options)?;
    let window = (1.0 / cp.params.tau_s).round() as usize;
    report.kv("plant", "cart_pole");
    report.kv("horizon", cp.reference.horizon());
    report.kv("fir", clm.fir().map_or("none".to_string(), |f| f.to_string()));
    report.kv("reference_consistency", sci(cp.consistency));
    report.kv("initial_offset", format!("{:?}", noise.initial_offset));
    report.kv("peak_w_hat_inf", sci(run.peak_w_hat()));
    report.kv("final_second_ratio", sci(run.final_window_ratio(window)));
    report.kv(
        "diverged_at",
        run.diverged_at.map_or("none".to_string(), |t| t.to_string()),
    );
    norms_report(report, "w_hat", &run.trace.w_hat, &cfg.p_norms);
    out.write("trace.csv", |f| Ok(run.write_csv(f)?))?;
    out.write("reference.csv", |f| Ok(cp.reference.write_csv(cp.params.tau_s, f)?))?;
    if write_clm {
        save_clm(&clm, out)?;
    }
    Ok(())
}

pub fn demo_cartpole_cmd(cfg: &RunConfig, out: &mut OutDir) -> anyhow::Result<Verdict> {
    let mut report = Report::default();
    report.line("# demo-cartpole");
    tracking_run(cfg, out, &mut report, true)?;
    report.save(out, "summary.txt")?;
    Ok(Verdict::Success)
}

/// `Fˣ R + Fᵘ M + I − R` for a linear plant.
fn residual_kernel(plant: &Plant, clm: &FirClm) -> anyhow::Result<LinearCausalKernel> {
    let (fx, fu) = plant.linear_kernels(clm.horizon()).context("linear plant")?;
    let identity = LinearCausalKernel::identity(clm.state_dim(), clm.horizon(), Some(1));
    Ok(fx
        .compose(&clm.r)?
        .add(&fu.compose(&clm.m)?)?
        .add(&identity)?
        .sub(&clm.r)?)
}

fn gaussian_trials(dim: usize, horizon: usize, count: usize, sigma: f64, seed: u64) -> Vec<Sequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            Sequence::from_fn(dim, horizon, |_| {
                DVector::from_fn(dim, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
            })
        })
        .collect()
}

pub fn certify_cmd(cfg: &RunConfig, out: &mut OutDir) -> anyhow::Result<Verdict> {
    let c = &cfg.certify;
    let mut report = Report::default();
    report.line("# certify");
    let mut certified = match &c.target {
        CertifyTarget::ScaledDelay { gamma, dim, horizon } => {
            let seed = cfg.require_seed("certify")?;
            let delta = Operator::delay(*dim, 1).scale(*gamma);
            let cert = estimate_gain(&delta, &GainEstimation::new(c.norm, c.rho, c.samples, seed, *horizon))?;
            let inverse = Operator::identity(*dim).sub(&delta)?.inverse()?;
            report.kv("target", format!("scaled_delay(gamma = {gamma})"));
            certificate_lines(&mut report, &cert);
            report.line("trial,w_norm,w_hat_norm,bound,margin,verdict");
            let mut failures = 0;
            for (i, w) in gaussian_trials(*dim, *horizon, c.trials, c.sigma, seed.wrapping_add(1))
                .iter()
                .enumerate()
            {
                let w_hat = inverse.evaluate(w)?;
                let (wn, hn) = (w.norm(c.norm, c.norm), w_hat.norm(c.norm, c.norm));
                let bound = small_gain_bound(&cert, wn);
                let verdict = match bound {
                    None => "outside_hypothesis",
                    Some(b) if hn <= b * (1.0 + 1e-9) => "pass",
                    Some(_) => "fail",
                };
                failures += usize::from(verdict == "fail");
                let opt = |x: Option<f64>| x.map_or("none".to_string(), sci);
                report.line(format!(
                    "{i},{},{},{},{},{}",
                    sci(wn),
                    sci(hn),
                    opt(bound),
                    opt(bound.map(|b| b - hn)),
                    verdict
                ));
            }
            report.kv("failures", failures);
            cert.status() != Status::NotCertified && failures == 0
        }
        CertifyTarget::Loop | CertifyTarget::Mismatch { .. } => {
            let p = lti(cfg, "certify")?;
            let model = LtvModel::time_invariant(p.a.clone(), p.b.clone(), p.horizon)?;
            let clm = obtain_clm(&model, cfg)?;
            let true_a = match &c.target {
                CertifyTarget::Mismatch { true_a } => {
                    let m = matrix("certify.target.true_a", true_a)?;
                    if m.shape() != p.a.shape() {
                        return Err(config_error("certify.target.true_a must have the shape of plant.a"));
                    }
                    m
                }
                _ => p.a.clone(),
            };
            let plant = Plant::lti(true_a, p.b.clone())?;
            let cert = if c.norm == Norm::Inf {
                GainCertificate::exact_kernel(&residual_kernel(&plant, &clm)?)
            } else {
                let seed = cfg.require_seed("certify")?;
                let psi = ClmPair::from_affine(clm.clone());
                estimate_gain(
                    &residual_operator(&plant, &psi)?,
                    &GainEstimation::new(c.norm, c.rho, c.samples, seed, p.horizon),
                )?
            };
            let seed = if c.trials > 0 { cfg.require_seed("certify")? } else { 0 };
            let trials: Vec<Trial> = gaussian_trials(p.a.nrows(), p.horizon, c.trials, c.sigma, seed.wrapping_add(1))
                .into_iter()
                .map(|w| Trial::nominal(w, p.b.ncols()))
                .collect();
            let loop_report = certify_loop(&plant, &ClmPair::from_affine(clm), &cert, &trials)?;
            report.kv(
                "target",
                if matches!(c.target, CertifyTarget::Loop) {
                    "loop"
                } else {
                    "mismatch"
                },
            );
            report.kv("contractive", cert.is_contractive());
            let mut text = Vec::new();
            loop_report.write_text(&mut text)?;
            report.extend(&String::from_utf8(text)?);
            report.kv("failures", loop_report.failures());
            cert.status() != Status::NotCertified && loop_report.failures() == 0
        }
    };
    if cfg.antiwindup.is_some() {
        report.line("# anti-windup");
        certified &= antiwindup_analysis(cfg, out, &mut report)?;
    }
    report.kv("certified", certified);
    report.save(out, "certificate.txt")?;
    Ok(if certified {
        Verdict::Success
    } else {
        Verdict::NotCertified
    })
}

fn certificate_lines(report: &mut Report, cert: &GainCertificate) {
    report.kv("status", cert.status());
    report.kv("contractive", cert.is_contractive());
    report.kv("method", format!("{:?}", cert.method));
    report.kv("p", cert.p);
    report.kv("gamma", sci(cert.gamma));
    report.kv("beta", sci(cert.beta));
    report.kv("rho", cert.rho.map_or("unbounded".to_string(), sci));
    report.kv("samples", cert.sample_count);
    report.kv("seed", cert.seed);
}

/// Wraps the CLM with the open-loop level, simulates the saturated loop, and
/// evaluates the ŵ bound. Returns whether the bound applies and holds.
fn antiwindup_analysis(cfg: &RunConfig, out: &mut OutDir, report: &mut Report) -> anyhow::Result<bool> {
    let aw = cfg.antiwindup.as_ref().expect("checked by caller");
    let p = lti(cfg, "anti-windup")?;
    let n = p.a.nrows();
    aw.w_set
        .validate()
        .map_err(|e| config_error(format!("antiwindup.w_set: {e}")))?;
    if aw.w_set.dim() != n {
        return Err(config_error(format!(
            "antiwindup.w_set has dimension {}, state dimension is {n}",
            aw.w_set.dim()
        )));
    }
    let model = LtvModel::time_invariant(p.a.clone(), p.b.clone(), p.horizon)?;
    let clm = obtain_clm(&model, cfg)?;
    let norm = aw.norm;
    let t_bar = match aw.t_bar {
        Some(t) => t,
        None => min_contraction_horizon(&p.a, norm, aw.t_max).ok_or_else(|| {
            config_error(format!(
                "no power A^T̄ with T̄ ≤ {} contracts in the {norm}-norm; set antiwindup.t_bar",
                aw.t_max
            ))
        })?,
    };
    let (lo, hi) = aw.w_set.outer_box();
    let img = image_bounds(
        &clm,
        &ConvexSet::Box {
            lower: lo.clone(),
            upper: hi.clone(),
        },
    )?;
    let sets = ConstraintSets {
        w: aw.w_set.clone(),
        x: aw.x_set.clone().unwrap_or(ConvexSet::Box {
            lower: img.x_lower,
            upper: img.x_upper,
        }),
        u: aw.u_set.clone().unwrap_or(ConvexSet::Box {
            lower: img.u_lower,
            upper: img.u_upper,
        }),
    };
    let containment = verify_containment(&clm, &ConvexSet::Box { lower: lo, upper: hi }, &sets.x, &sets.u)?;
    out.write("containment.csv", |f| Ok(containment.write_csv(f)?))?;
    report.kv("t_bar", t_bar);
    report.kv("norm", norm);
    report.kv("eta_bar", sci(aw.w_set.eta_bar(norm)));
    report.kv("containment_min_margin", sci(containment.min_margin()));
    let spec = antiwindup_wrap(&p.a, &p.b, &clm, &sets, t_bar)?;

    let w = disturbance(&cfg.simulation.disturbance, n, p.horizon, cfg.seed)?;
    let trace = simulate_saturated(&p.a, &p.b, &sets.u, &spec, &w)?;
    let reduced = saturated_internal_dynamics(&spec, &p.a, &w)?;
    let w_norm = w.norm(norm, norm);
    let w_hat_norm = trace.w_hat.norm(norm, norm);
    let outcome = awp_bound(&p.a, t_bar, &aw.w_set, norm, w_norm, aw.gamma)?;
    let conv = convergence_check(&spec, &trace.w_hat, &sets.x)?;
    report.kv("reduction_agreement", sci(trace.w_hat.max_abs_diff(&reduced)));
    report.kv("w_norm", sci(w_norm));
    report.kv("w_hat_norm", sci(w_hat_norm));
    let holds = match outcome {
        AwpOutcome::Bound {
            branch,
            contraction,
            gain,
            bound,
            admissible,
        } => {
            report.kv("branch", branch);
            report.kv("contraction", sci(contraction));
            report.kv("gain", sci(gain));
            report.kv("bound", sci(bound));
            report.kv("admissible", sci(admissible));
            report.kv("bound_margin", sci(bound - w_hat_norm));
            w_hat_norm <= bound * (1.0 + 1e-12)
        }
        AwpOutcome::Infeasible {
            contraction,
            admissible,
        } => {
            report.kv("branch", "none");
            report.kv("contraction", sci(contraction));
            report.kv("admissible", admissible.map_or("none".to_string(), sci));
            false
        }
    };
    report.kv("bound_holds", holds);
    report.kv("t_prime", conv.t_prime.map_or("none".to_string(), |t| t.to_string()));
    report.kv("max_violation_after", sci(conv.max_violation_after));
    out.write("trace.csv", |f| Ok(trace.write_csv(f)?))?;
    Ok(holds)
}

pub fn demo_antiwindup_cmd(cfg: &RunConfig, out: &mut OutDir) -> anyhow::Result<Verdict> {
    if cfg.antiwindup.is_none() {
        return Err(config_error("demo-antiwindup needs an [antiwindup] section"));
    }
    let mut report = Report::default();
    report.line("# demo-antiwindup");
    let holds = antiwindup_analysis(cfg, out, &mut report)?;
    report.save(out, "summary.txt")?;
    Ok(if holds { Verdict::Success } else { Verdict::NotCertified })
}
