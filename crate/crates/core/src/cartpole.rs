//! Cart-pole swing-up tracking.
//!
//! State `x = (x_c, θ, ẋ_c, θ̇)` with `θ = 0` hanging down, input the cart force `f`.
//! With `s = sin θ`, `c = cos θ` and `D = m_c + m_p s²` the manipulator equations
//!
//! ```text
//! (m_c + m_p) ẍ_c + m_p l θ̈ c − m_p l θ̇² s = f
//! m_p l ẍ_c c + m_p l² θ̈ + m_p g l s = 0
//! ```
//!
//! solve to
//!
//! ```text
//! ẍ_c = (f + m_p s (l θ̇² + g c)) / D
//! θ̈   = (−f c − m_p l θ̇² c s − (m_c + m_p) g s) / (l D)
//! ```

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlsError};
use crate::ltv::{FirClm, LtvModel};
use crate::operator::io::format_float;
use crate::operator::Sequence;
use crate::runtime::{LoopTrace, SlController};

pub const STATE_DIM: usize = 4;
pub const DEFAULT_SUBSTEPS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPoleParams {
    pub m_c: f64,
    pub m_p: f64,
    pub l: f64,
    pub g: f64,
    pub tau_s: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            m_c: 1.0,
            m_p: 0.1,
            l: 0.5,
            g: 9.81,
            tau_s: 0.033,
        }
    }
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("m_c", self.m_c),
            ("m_p", self.m_p),
            ("l", self.l),
            ("g", self.g),
            ("tau_s", self.tau_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SlsError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn denom(&self, theta: f64) -> f64 {
        self.m_c + self.m_p * theta.sin().powi(2)
    }
}

/// `ẋ = F(x) + g(x) f`.
pub fn continuous_dynamics(p: &CartPoleParams, x: &DVector<f64>, u: f64) -> DVector<f64> {
    let (th, v, w) = (x[1], x[2], x[3]);
    let (s, c) = th.sin_cos();
    let d = p.denom(th);
    let acc = (u + p.m_p * s * (p.l * w * w + p.g * c)) / d;
    let alpha = (-u * c - p.m_p * p.l * w * w * c * s - (p.m_c + p.m_p) * p.g * s) / (p.l * d);
    DVector::from_vec(vec![v, w, acc, alpha])
}

/// Input vector field `g(x)`.
pub fn input_field(p: &CartPoleParams, x: &DVector<f64>) -> DVector<f64> {
    let d = p.denom(x[1]);
    DVector::from_vec(vec![0.0, 0.0, 1.0 / d, -x[1].cos() / (p.l * d)])
}

/// Residuals of the two implicit manipulator equations for a given derivative.
pub fn manipulator_residual(p: &CartPoleParams, x: &DVector<f64>, xdot: &DVector<f64>, u: f64) -> [f64; 2] {
    let (th, w) = (x[1], x[3]);
    let (acc, alpha) = (xdot[2], xdot[3]);
    let (s, c) = th.sin_cos();
    [
        (p.m_c + p.m_p) * acc + p.m_p * p.l * alpha * c - p.m_p * p.l * w * w * s - u,
        p.m_p * p.l * acc * c + p.m_p * p.l * p.l * alpha + p.m_p * p.g * p.l * s,
    ]
}

/// Jacobian of `F(x) + g(x)u` with respect to `x`.
pub fn jacobian(p: &CartPoleParams, x: &DVector<f64>, u: f64) -> DMatrix<f64> {
    let (th, w) = (x[1], x[3]);
    let (s, c) = th.sin_cos();
    let (mp, l, g) = (p.m_p, p.l, p.g);
    let d = p.denom(th);
    let dd = 2.0 * mp * s * c;
    let n1 = u + mp * s * (l * w * w + g * c);
    let n1_th = mp * (c * l * w * w + g * (c * c - s * s));
    let n1_w = 2.0 * mp * s * l * w;
    let n2 = -u * c - mp * l * w * w * c * s - (p.m_c + mp) * g * s;
    let n2_th = u * s - mp * l * w * w * (c * c - s * s) - (p.m_c + mp) * g * c;
    let n2_w = -2.0 * mp * l * w * c * s;
    let mut j = DMatrix::zeros(4, 4);
    j[(0, 2)] = 1.0;
    j[(1, 3)] = 1.0;
    j[(2, 1)] = (n1_th * d - n1 * dd) / (d * d);
    j[(2, 3)] = n1_w / d;
    j[(3, 1)] = (n2_th * d - n2 * dd) / (l * d * d);
    j[(3, 3)] = n2_w / (l * d);
    j
}

/// Kinetic plus potential energy of the frictionless system.
pub fn energy(p: &CartPoleParams, x: &DVector<f64>) -> f64 {
    let (th, v, w) = (x[1], x[2], x[3]);
    0.5 * (p.m_c + p.m_p) * v * v + p.m_p * p.l * v * w * th.cos() + 0.5 * p.m_p * p.l * p.l * w * w
        - p.m_p * p.g * p.l * th.cos()
}

fn rk4_step(p: &CartPoleParams, x: &DVector<f64>, u: f64, h: f64) -> DVector<f64> {
    let k1 = continuous_dynamics(p, x, u);
    let k2 = continuous_dynamics(p, &(x + &k1 * (h / 2.0)), u);
    let k3 = continuous_dynamics(p, &(x + &k2 * (h / 2.0)), u);
    let k4 = continuous_dynamics(p, &(x + &k3 * h), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// `φ_{τ_s}(x, u)`: the state after `τ_s` with `u` held, by fixed-step RK4.
pub fn zoh_flow(p: &CartPoleParams, x: &DVector<f64>, u: f64, substeps: usize) -> Result<DVector<f64>> {
    if substeps == 0 {
        return Err(SlsError::InvalidArgument("substeps must be at least 1".into()));
    }
    if x.len() != STATE_DIM {
        return Err(SlsError::DimensionMismatch {
            context: "zoh_flow",
            expected: STATE_DIM,
            actual: x.len(),
        });
    }
    let h = p.tau_s / substeps as f64;
    let mut s = x.clone();
    for _ in 0..substeps {
        s = rk4_step(p, &s, u, h);
        if !s.iter().all(|v| v.is_finite()) {
            return Err(SlsError::NonFinite("cart-pole state during integration".into()));
        }
    }
    Ok(s)
}

/// `(exp(Jτ), ∫₀^τ exp(Js) ds · g)` from the exponential of `[[J, g], [0, 0]]τ`.
pub fn zoh_discretize(j: &DMatrix<f64>, g: &DMatrix<f64>, tau: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (j.nrows(), g.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(j * tau));
    aug.view_mut((0, n), (n, m)).copy_from(&(g * tau));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// `(Â, B̂)` of the ZOH system linearized at `(x, u)`.
pub fn linearize_zoh(p: &CartPoleParams, x: &DVector<f64>, u: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let g = DMatrix::from_column_slice(4, 1, input_field(p, x).as_slice());
    zoh_discretize(&jacobian(p, x, u), &g, p.tau_s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    File,
    /// Sampled from the continuous-time heuristic swing-up.
    Heuristic,
    /// Rolled out through `zoh_flow`; consistent with the discrete plant.
    Rollout,
}

/// Sampled reference `(x^d_t, u^d_t)`, `t = 0..=H`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrajectory {
    pub x_d: Sequence,
    pub u_d: Sequence,
    pub source: ReferenceSource,
}

/// Energy pumping followed by a linear upright hold, run in continuous time.
/// Not derived from any published trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwingUpHeuristic {
    pub energy_gain: f64,
    pub centering_kp: f64,
    pub centering_kd: f64,
    pub max_accel: f64,
    pub kick_duration: f64,
    /// Switch to the hold law inside this angle of upright (rad) …
    pub capture_angle: f64,
    /// … and below this angular rate (rad/s).
    pub capture_rate: f64,
    /// Cart-acceleration feedback on `(x_c, θ − π, ẋ_c, θ̇)` for the hold.
    pub hold_gain: [f64; 4],
    pub substeps: usize,
}

impl Default for SwingUpHeuristic {
    fn default() -> Self {
        Self {
            energy_gain: 10.0,
            centering_kp: 1.0,
            centering_kd: 2.0,
            max_accel: 3.5,
            kick_duration: 0.1,
            capture_angle: 0.3,
            capture_rate: 2.0,
            // closed-loop poles −4, −4, −5, −5 of the upright linearization at the paper parameters
            hold_gain: [
                20.387_359_836_901_1,
                -80.503_679_918_450_6,
                18.348_623_853_211,
                -18.174_311_926_605_5,
            ],
            substeps: DEFAULT_SUBSTEPS,
        }
    }
}

fn force_for_accel(p: &CartPoleParams, x: &DVector<f64>, a: f64) -> f64 {
    let (s, c) = x[1].sin_cos();
    p.denom(x[1]) * a - p.m_p * s * (p.l * x[3] * x[3] + p.g * c)
}

impl ReferenceTrajectory {
    pub fn new(x_d: Sequence, u_d: Sequence, source: ReferenceSource) -> Result<Self> {
        if x_d.dim() != STATE_DIM || u_d.dim() != 1 {
            return Err(SlsError::DimensionMismatch {
                context: "ReferenceTrajectory",
                expected: STATE_DIM,
                actual: x_d.dim(),
            });
        }
        if x_d.horizon() != u_d.horizon() {
            return Err(SlsError::HorizonMismatch {
                context: "ReferenceTrajectory",
                expected: x_d.horizon(),
                actual: u_d.horizon(),
            });
        }
        Ok(Self { x_d, u_d, source })
    }

    pub fn horizon(&self) -> usize {
        self.x_d.horizon()
    }

    /// Holds `(x, u)` for `horizon` steps.
    pub fn constant(x: DVector<f64>, u: f64, horizon: usize) -> Result<Self> {
        Self::new(
            Sequence::from_fn(STATE_DIM, horizon, |_| x.clone()),
            Sequence::from_fn(1, horizon, |_| DVector::from_element(1, u)),
            ReferenceSource::Rollout,
        )
    }

    /// `x^d_{t+1} = φ_{τ_s}(x^d_t, u^d_t)` from `x0` under the given forces.
    /// The last force only pads `u^d` to the state horizon.
    pub fn rollout(p: &CartPoleParams, x0: DVector<f64>, forces: &[f64], substeps: usize) -> Result<Self> {
        if forces.is_empty() {
            return Err(SlsError::InvalidArgument("rollout needs at least one force".into()));
        }
        let mut xs = vec![x0];
        for &f in &forces[..forces.len() - 1] {
            let next = zoh_flow(p, xs.last().expect("nonempty"), f, substeps)?;
            xs.push(next);
        }
        let us = forces.iter().map(|f| DVector::from_element(1, *f)).collect();
        Self::new(
            Sequence::new(STATE_DIM, xs)?,
            Sequence::new(1, us)?,
            ReferenceSource::Rollout,
        )
    }

    /// Swing-up from rest at the bottom, sampled every `τ_s`. With `zoh` the
    /// policy is sampled and held, giving a discretization-consistent reference;
    /// otherwise it runs in continuous time and is then sampled.
    pub fn swing_up(p: &CartPoleParams, horizon: usize, heur: &SwingUpHeuristic, zoh: bool) -> Result<Self> {
        p.validate()?;
        let n_sub = heur.substeps.max(1);
        let h = p.tau_s / n_sub as f64;
        let mut captured = false;
        let mut policy = |t: f64, x: &DVector<f64>| {
            let phi = (x[1] - std::f64::consts::PI + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
                - std::f64::consts::PI;
            if !captured && phi.abs() < heur.capture_angle && x[3].abs() < heur.capture_rate {
                captured = true;
            }
            let a = if captured {
                let k = &heur.hold_gain;
                k[0] * x[0] + k[1] * phi + k[2] * x[2] + k[3] * x[3]
            } else {
                let e = 0.5 * p.m_p * p.l * p.l * x[3] * x[3] - p.m_p * p.g * p.l * x[1].cos();
                let e_up = p.m_p * p.g * p.l;
                let mut a = heur.energy_gain * x[3] * x[1].cos() * (e - e_up)
                    - heur.centering_kp * x[0]
                    - heur.centering_kd * x[2];
                if t < heur.kick_duration {
                    a += heur.max_accel;
                }
                a.clamp(-heur.max_accel, heur.max_accel)
            };
            force_for_accel(p, x, a)
        };
        let mut x = DVector::zeros(STATE_DIM);
        let mut xs = Vec::with_capacity(horizon + 1);
        let mut us = Vec::with_capacity(horizon + 1);
        for step in 0..=horizon {
            let t0 = step as f64 * p.tau_s;
            let f0 = policy(t0, &x);
            xs.push(x.clone());
            us.push(DVector::from_element(1, f0));
            if step == horizon {
                break;
            }
            if zoh {
                x = zoh_flow(p, &x, f0, n_sub)?;
            } else {
                for i in 0..n_sub {
                    let f = if i == 0 { f0 } else { policy(t0 + i as f64 * h, &x) };
                    x = rk4_step(p, &x, f, h);
                }
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(SlsError::NonFinite("heuristic swing-up".into()));
                }
            }
        }
        let source = if zoh {
            ReferenceSource::Rollout
        } else {
            ReferenceSource::Heuristic
        };
        Self::new(Sequence::new(STATE_DIM, xs)?, Sequence::new(1, us)?, source)
    }

    /// Columns `t, x_c, theta, x_dot, theta_dot, f`; `t` in seconds, angles in radians.
    pub fn write_csv<W: Write>(&self, tau_s: f64, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(["t", "x_c", "theta", "x_dot", "theta_dot", "f"])?;
        for t in 0..=self.horizon() {
            let x = &self.x_d[t];
            let mut row = vec![format_float(t as f64 * tau_s)];
            row.extend(x.iter().map(|v| format_float(*v)));
            row.push(format_float(self.u_d[t][0]));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the layout of [`write_csv`]; rows must be in increasing time.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let headers = rd.headers()?.clone();
        let expected = ["t", "x_c", "theta", "x_dot", "theta_dot", "f"];
        if headers.iter().map(str::trim).ne(expected) {
            return Err(SlsError::Parse(format!(
                "reference header must be {}",
                expected.join(",")
            )));
        }
        let mut xs = Vec::new();
        let mut us = Vec::new();
        let mut last_t = f64::NEG_INFINITY;
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| SlsError::Parse(format!("bad number `{s}`")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 6 {
                return Err(SlsError::Parse(format!("expected 6 columns, found {}", vals.len())));
            }
            if !(vals[0] > last_t) {
                return Err(SlsError::Parse("reference times must increase".into()));
            }
            last_t = vals[0];
            xs.push(DVector::from_column_slice(&vals[1..5]));
            us.push(DVector::from_element(1, vals[5]));
        }
        if xs.is_empty() {
            return Err(SlsError::Parse("reference has no rows".into()));
        }
        Self::new(
            Sequence::new(STATE_DIM, xs)?,
            Sequence::new(1, us)?,
            ReferenceSource::File,
        )
    }
}

/// Linear model along the reference and the trajectory error
/// `e_t = φ_{τ_s}(x^d_{t−1}, u^d_{t−1}) − x^d_t` (`e_0 = 0`).
#[derive(Clone, Debug)]
pub struct TrackingModel {
    pub model: LtvModel,
    pub e: Sequence,
}

pub fn build_tracking_model(
    p: &CartPoleParams,
    reference: &ReferenceTrajectory,
    substeps: usize,
) -> Result<TrackingModel> {
    p.validate()?;
    let h = reference.horizon();
    if h == 0 {
        return Err(SlsError::InvalidArgument("reference horizon must be at least 1".into()));
    }
    let mut a = Vec::with_capacity(h);
    let mut b = Vec::with_capacity(h);
    let mut e = vec![DVector::zeros(STATE_DIM)];
    for t in 0..h {
        let (x, u) = (&reference.x_d[t], reference.u_d[t][0]);
        let (at, bt) = linearize_zoh(p, x, u);
        a.push(at);
        b.push(bt);
        e.push(zoh_flow(p, x, u, substeps)? - &reference.x_d[t + 1]);
    }
    Ok(TrackingModel {
        model: LtvModel::new(a, b, reference.x_d.clone(), reference.u_d.clone())?,
        e: Sequence::new(STATE_DIM, e)?,
    })
}

/// Per-channel i.i.d. Gaussian perturbations and the initial-state offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingNoise {
    pub sigma_w: [f64; 4],
    pub sigma_v: [f64; 4],
    pub sigma_d: f64,
    pub initial_offset: [f64; 4],
}

impl Default for TrackingNoise {
    fn default() -> Self {
        Self {
            sigma_w: [0.0; 4],
            sigma_v: [0.0; 4],
            sigma_d: 0.0,
            initial_offset: [0.0; 4],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingPlant {
    /// The ZOH flow `φ_{τ_s}`.
    Nonlinear,
    /// The synthesis model `x^d_t + Â(x − x^d) + B̂(u − u^d)`.
    Linearized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingOptions {
    pub substeps: usize,
    pub plant: TrackingPlant,
    /// Stop once `‖x_t − x^d_t‖∞` exceeds this.
    pub blow_up: f64,
}

impl Default for TrackingOptions {
    fn default() -> Self {
        Self {
            substeps: DEFAULT_SUBSTEPS,
            plant: TrackingPlant::Nonlinear,
            blow_up: 1e3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackingReport {
    /// Signals up to the last simulated step; `w_0` carries the initial state.
    pub trace: LoopTrace,
    pub reference: ReferenceTrajectory,
    /// `‖ŵ_t‖∞` per step.
    pub w_hat_inf: Vec<f64>,
    /// Trajectory error `e_t`.
    pub e: Sequence,
    /// `ē_t = e_t / ‖x_t‖∞`.
    pub e_bar: Sequence,
    /// First step at which the state left the blow-up bound or became non-finite.
    pub diverged_at: Option<usize>,
    pub tau_s: f64,
}

impl TrackingReport {
    pub fn peak_w_hat(&self) -> f64 {
        self.w_hat_inf.iter().copied().fold(0.0, f64::max)
    }

    /// `max ‖ŵ_t‖∞` over the last `window` steps divided by the peak.
    pub fn final_window_ratio(&self, window: usize) -> f64 {
        let n = self.w_hat_inf.len();
        let tail = self.w_hat_inf[n.saturating_sub(window)..]
            .iter()
            .copied()
            .fold(0.0, f64::max);
        let peak = self.peak_w_hat();
        if peak == 0.0 {
            0.0
        } else {
            tail / peak
        }
    }

    /// Display-unit CSV: seconds, metres, degrees, newtons.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "t",
            "time",
            "x_c",
            "theta_deg",
            "x_dot",
            "theta_dot_deg",
            "f",
            "xd_c",
            "thetad_deg",
            "xd_dot",
            "thetad_dot_deg",
            "fd",
            "w_hat_inf",
            "e_bar_inf",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for (name, dim) in [("w", 4), ("v", 4), ("d", 1)] {
            header.extend((0..dim).map(|i| format!("{name}{i}")));
        }
        wr.write_record(&header)?;
        let deg = |x: &DVector<f64>| vec![x[0], x[1].to_degrees(), x[2], x[3].to_degrees()];
        let tr = &self.trace;
        for t in 0..=tr.horizon() {
            let mut row = vec![t.to_string(), format_float(t as f64 * self.tau_s)];
            let mut nums = deg(&tr.x[t]);
            nums.push(tr.u[t][0]);
            nums.extend(deg(&self.reference.x_d[t]));
            nums.push(self.reference.u_d[t][0]);
            nums.push(self.w_hat_inf[t]);
            nums.push(self.e_bar[t].amax());
            nums.extend(tr.w[t].iter());
            nums.extend(tr.v[t].iter());
            nums.extend(tr.d[t].iter());
            row.extend(nums.into_iter().map(format_float));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Closed loop of the cart-pole and the affine SL controller:
/// `ŵ_t = x_t + v_t − x^d_t − Σ_{k≥2} R_{t,k} ŵ_{t+1−k}`,
/// `u_t = u^d_t + Σ_k M_{t,k} ŵ_{t+1−k} + d_t`.
pub fn run_tracking_experiment(
    p: &CartPoleParams,
    reference: &ReferenceTrajectory,
    clm: &FirClm,
    noise: &TrackingNoise,
    seed: u64,
    opts: &TrackingOptions,
) -> Result<TrackingReport> {
    p.validate()?;
    let h = reference.horizon();
    if clm.horizon() != h || clm.state_dim() != STATE_DIM || clm.input_dim() != 1 {
        return Err(SlsError::InvalidArgument(format!(
            "CLM of shape (n = {}, m = {}, H = {}) does not fit the reference horizon {h}",
            clm.state_dim(),
            clm.input_dim(),
            clm.horizon()
        )));
    }
    let tracking = build_tracking_model(p, reference, opts.substeps)?;
    let mut ctrl = SlController::new(clm.psi_x(), clm.psi_u())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |sigma: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        sigma * z
    };
    let (mut ws, mut vs, mut ds) = (Vec::new(), Vec::new(), Vec::new());
    let (mut xs, mut us, mut e_bar) = (Vec::new(), Vec::new(), Vec::new());
    let mut diverged_at = None;
    for t in 0..=h {
        let mut w = DVector::from_fn(STATE_DIM, |i, _| gauss(noise.sigma_w[i]));
        let v = DVector::from_fn(STATE_DIM, |i, _| gauss(noise.sigma_v[i]));
        let d = DVector::from_element(1, gauss(noise.sigma_d));
        let x = if t == 0 {
            w += &reference.x_d[0] + DVector::from_column_slice(&noise.initial_offset);
            w.clone()
        } else {
            let (xp, up) = (&xs[t - 1], us[t - 1]);
            let next = match opts.plant {
                TrackingPlant::Nonlinear => zoh_flow(p, xp, up, opts.substeps),
                TrackingPlant::Linearized => Ok(&reference.x_d[t]
                    + tracking.model.a(t - 1) * (xp - &reference.x_d[t - 1])
                    + tracking.model.b(t - 1) * DVector::from_element(1, up - reference.u_d[t - 1][0])),
            };
            match next {
                Ok(n) => n + &w,
                Err(SlsError::NonFinite(_)) => {
                    diverged_at = Some(t);
                    break;
                }
                Err(e) => return Err(e),
            }
        };
        if !x.iter().all(|v| v.is_finite()) || (&x - &reference.x_d[t]).amax() > opts.blow_up {
            diverged_at = Some(t);
            break;
        }
        let b = ctrl.step(t, &(&x + &v))?;
        let xn = x.amax();
        e_bar.push(if xn > 0.0 {
            &tracking.e[t] / xn
        } else {
            DVector::zeros(STATE_DIM)
        });
        us.push(b[0] + d[0]);
        xs.push(x);
        ws.push(w);
        vs.push(v);
        ds.push(d);
    }
    let steps = xs.len();
    if steps == 0 {
        return Err(SlsError::NonFinite("initial state".into()));
    }
    let w_hat: Vec<DVector<f64>> = ctrl.history().to_vec();
    let w_hat_inf = w_hat.iter().map(|c| c.amax()).collect();
    let trace = LoopTrace {
        w: Sequence::new(STATE_DIM, ws)?,
        x: Sequence::new(STATE_DIM, xs)?,
        u: Sequence::new(1, us.into_iter().map(|u| DVector::from_element(1, u)).collect())?,
        w_hat: Sequence::new(STATE_DIM, w_hat)?,
        v: Sequence::new(STATE_DIM, vs)?,
        d: Sequence::new(1, ds)?,
    };
    Ok(TrackingReport {
        trace,
        reference: reference.clone(),
        w_hat_inf,
        e: tracking.e.prefix(steps),
        e_bar: Sequence::new(STATE_DIM, e_bar)?,
        diverged_at,
        tau_s: p.tau_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltv::{synthesize_h2_fir, verify_subspace};
    use std::f64::consts::PI;

    fn state(v: [f64; 4]) -> DVector<f64> {
        DVector::from_column_slice(&v)
    }

    #[test]
    fn equilibria_and_unit_push() {
        let p = CartPoleParams::default();
        assert!(continuous_dynamics(&p, &state([0.0; 4]), 0.0).amax() == 0.0);
        assert!(continuous_dynamics(&p, &state([0.0, PI, 0.0, 0.0]), 0.0).amax() < 1e-14);
        let d = continuous_dynamics(&p, &state([0.0; 4]), 1.0);
        assert!((d[2] - 1.0).abs() < 1e-15 && (d[3] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn explicit_form_solves_manipulator_equations() {
        let p = CartPoleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-7.0..7.0));
            let u = rng.random_range(-20.0..20.0);
            let r = manipulator_residual(&p, &x, &continuous_dynamics(&p, &x, u), u);
            assert!(r[0].abs() <= 1e-12 && r[1].abs() <= 1e-12, "{r:?}");
            let affine = continuous_dynamics(&p, &x, 0.0) + input_field(&p, &x) * u;
            assert!((affine - continuous_dynamics(&p, &x, u)).amax() <= 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = CartPoleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let u = rng.random_range(-5.0..5.0);
            let j = jacobian(&p, &x, u);
            for c in 0..4 {
                let mut dx = DVector::zeros(4);
                dx[c] = 1e-6;
                let fd = (continuous_dynamics(&p, &(&x + &dx), u) - continuous_dynamics(&p, &(&x - &dx), u)) / 2e-6;
                assert!((fd - j.column(c)).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn flow_fixed_points_and_order() {
        let p = CartPoleParams::default();
        for x in [state([0.3, 0.0, 0.0, 0.0]), state([-1.0, PI, 0.0, 0.0])] {
            assert!((zoh_flow(&p, &x, 0.0, 16).unwrap() - &x).amax() <= 1e-12);
        }
        let x = state([0.1, 2.0, -0.5, 1.5]);
        let fine = zoh_flow(&p, &x, 0.7, 1024).unwrap();
        let err = |n| (zoh_flow(&p, &x, 0.7, n).unwrap() - &fine).norm();
        let ratio = err(2) / err(4);
        assert!((ratio / 16.0 - 1.0).abs() < 0.3, "ratio {ratio}");
        assert!(zoh_flow(&p, &x, 0.7, 0).is_err());
    }

    #[test]
    fn energy_drift_is_small() {
        let p = CartPoleParams::default();
        let mut x = state([0.0, 2.5, 0.3, -1.0]);
        for _ in 0..30 {
            let next = zoh_flow(&p, &x, 0.0, 16).unwrap();
            assert!((energy(&p, &next) - energy(&p, &x)).abs() <= 1e-8);
            x = next;
        }
    }

    #[test]
    fn discretization_examples() {
        let (a, b) = zoh_discretize(
            &DMatrix::zeros(4, 4),
            &DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]),
            0.033,
        );
        assert!((a - DMatrix::identity(4, 4)).amax() < 1e-15);
        assert!((b[(0, 0)] - 0.033).abs() < 1e-15 && b.rows(1, 3).amax() == 0.0);
        let tau = 0.033_f64;
        let (a, b) = zoh_discretize(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            tau,
        );
        assert!((a[(0, 0)] - tau.exp()).abs() < 1e-14);
        assert!((b[(0, 0)] - (tau.exp() - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn linearization_matches_flow_jacobian() {
        let p = CartPoleParams::default();
        let x = state([0.0, PI, 0.0, 0.0]);
        let (a, b) = linearize_zoh(&p, &x, 0.0);
        let eps = 1e-6;
        for c in 0..4 {
            let mut dx = DVector::zeros(4);
            dx[c] = eps;
            let fd = (zoh_flow(&p, &(&x + &dx), 0.0, 16).unwrap() - zoh_flow(&p, &(&x - &dx), 0.0, 16).unwrap())
                / (2.0 * eps);
            assert!((fd - a.column(c)).amax() < 5e-3);
        }
        let fd = (zoh_flow(&p, &x, eps, 16).unwrap() - zoh_flow(&p, &x, -eps, 16).unwrap()) / (2.0 * eps);
        assert!((fd - b.column(0)).amax() < 5e-3);
    }

    #[test]
    fn reference_csv_round_trip_and_errors() {
        let p = CartPoleParams::default();
        let r = ReferenceTrajectory::swing_up(&p, 20, &SwingUpHeuristic::default(), false).unwrap();
        let mut buf = Vec::new();
        r.write_csv(p.tau_s, &mut buf).unwrap();
        let back = ReferenceTrajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.x_d, r.x_d);
        assert_eq!(back.u_d, r.u_d);
        assert_eq!(back.source, ReferenceSource::File);
        assert!(ReferenceTrajectory::read_csv("t,x\n0,1\n".as_bytes()).is_err());
        assert!(
            ReferenceTrajectory::read_csv("t,x_c,theta,x_dot,theta_dot,f\n0,0,0,0,0,0\n0,0,0,0,0,0\n".as_bytes())
                .is_err()
        );
    }

    #[test]
    fn heuristic_swing_up_reaches_upright() {
        let p = CartPoleParams::default();
        let r = ReferenceTrajectory::swing_up(&p, 182, &SwingUpHeuristic::default(), false).unwrap();
        let end = &r.x_d[182];
        assert!((end[1] - PI).abs() < 0.02 && end[0].abs() < 0.05, "{end}");
        let up = (0..=182).find(|t| (r.x_d[*t][1] - PI).abs() < 0.3).unwrap();
        let secs = up as f64 * p.tau_s;
        assert!((2.0..4.0).contains(&secs), "upright after {secs} s");
    }

    #[test]
    fn tracking_model_examples() {
        let p = CartPoleParams::default();
        let r = ReferenceTrajectory::constant(DVector::zeros(4), 0.0, 10).unwrap();
        let tm = build_tracking_model(&p, &r, 16).unwrap();
        assert!((1..10).all(|t| tm.model.a(t) == tm.model.a(0)));
        assert!(tm.e.norm(crate::Norm::Inf, crate::Norm::Inf) == 0.0);
        let consistent = ReferenceTrajectory::swing_up(&p, 40, &SwingUpHeuristic::default(), true).unwrap();
        let tm = build_tracking_model(&p, &consistent, 16).unwrap();
        assert!(tm.e.norm(crate::Norm::Inf, crate::Norm::Inf) <= 1e-12);
        let rough = ReferenceTrajectory::swing_up(&p, 40, &SwingUpHeuristic::default(), false).unwrap();
        let tm = build_tracking_model(&p, &rough, 16).unwrap();
        assert!(tm.e.norm(crate::Norm::Inf, crate::Norm::Inf) > 1e-6);
    }

    fn tracking_setup(h: usize, zoh: bool) -> (CartPoleParams, ReferenceTrajectory, FirClm) {
        let p = CartPoleParams::default();
        let r = ReferenceTrajectory::swing_up(&p, h, &SwingUpHeuristic::default(), zoh).unwrap();
        let tm = build_tracking_model(&p, &r, 16).unwrap();
        let clm = synthesize_h2_fir(&tm.model, 20).unwrap();
        assert!(verify_subspace(&clm, &tm.model).unwrap() <= 1e-8);
        (p, r, clm)
    }

    #[test]
    fn linearized_plant_keeps_w_hat_at_zero() {
        let (p, r, clm) = tracking_setup(60, false);
        let noise = TrackingNoise {
            initial_offset: [0.0, 0.1, 0.0, 0.0],
            ..TrackingNoise::default()
        };
        let opts = TrackingOptions {
            plant: TrackingPlant::Linearized,
            ..TrackingOptions::default()
        };
        let rep = run_tracking_experiment(&p, &r, &clm, &noise, 0, &opts).unwrap();
        assert!((rep.w_hat_inf[0] - 0.1).abs() < 1e-15);
        assert!(rep.w_hat_inf[1..].iter().all(|w| *w <= 1e-12));
    }

    #[test]
    fn controller_structure_is_recomputable() {
        let (p, r, clm) = tracking_setup(40, false);
        let noise = TrackingNoise {
            sigma_w: [1e-3; 4],
            sigma_v: [1e-3; 4],
            sigma_d: 1e-2,
            initial_offset: [0.0, 0.2, 0.0, 0.0],
        };
        let rep = run_tracking_experiment(&p, &r, &clm, &noise, 3, &TrackingOptions::default()).unwrap();
        assert!(rep.diverged_at.is_none());
        let hist = rep.trace.w_hat.values();
        for t in 0..=40 {
            let u = r.u_d[t][0] + clm.m.apply_at(&hist[..=t])[0] + rep.trace.d[t][0];
            assert!((u - rep.trace.u[t][0]).abs() <= 1e-12);
        }
        let again = run_tracking_experiment(&p, &r, &clm, &noise, 3, &TrackingOptions::default()).unwrap();
        assert_eq!(again.trace, rep.trace);
    }

    #[test]
    fn blow_up_is_reported() {
        let (p, r, clm) = tracking_setup(30, false);
        let noise = TrackingNoise {
            sigma_d: 1e3,
            ..TrackingNoise::default()
        };
        let opts = TrackingOptions {
            blow_up: 1.0,
            ..TrackingOptions::default()
        };
        let rep = run_tracking_experiment(&p, &r, &clm, &noise, 1, &opts).unwrap();
        assert!(rep.diverged_at.is_some());
        assert_eq!(rep.trace.horizon() + 1, rep.diverged_at.unwrap());
    }
}
