//! System level controllers and closed-loop simulation.

use std::io::Write;

use nalgebra::DVector;

use crate::clm::{ClmPair, Plant};
use crate::error::{check_dim, Result, SlsError};
use crate::operator::io::format_float;
use crate::operator::{Operator, Sequence};

/// The dynamic controller SL(A, B):
/// `c_t = a_t − A_t(0, c_{t−1:0})`, `b_t = B_t(c_{t:0})`.
#[derive(Clone, Debug)]
pub struct SlController {
    a_op: Operator,
    b_op: Operator,
    history: Vec<DVector<f64>>,
}

impl SlController {
    pub fn new(a_op: Operator, b_op: Operator) -> Result<Self> {
        check_dim("SlController (B input)", a_op.out_dim(), b_op.in_dim())?;
        a_op.check_identity_plus_strict(24, 0x51)?;
        Ok(Self {
            a_op,
            b_op,
            history: Vec::new(),
        })
    }

    /// SL(Ψˣ, Ψᵘ).
    pub fn from_clm(psi: &ClmPair) -> Result<Self> {
        Self::new(psi.psi_x.clone(), psi.psi_u.clone())
    }

    pub fn state_dim(&self) -> usize {
        self.a_op.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.b_op.out_dim()
    }

    /// Internal state `c_{0:t}` recorded so far.
    pub fn history(&self) -> &[DVector<f64>] {
        &self.history
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Processes measurement `a_t` and returns `b_t`. Steps must arrive in order.
    pub fn step(&mut self, t: usize, measurement: &DVector<f64>) -> Result<DVector<f64>> {
        if t != self.history.len() {
            return Err(SlsError::OutOfOrder {
                expected: self.history.len(),
                actual: t,
            });
        }
        check_dim("SlController::step", self.state_dim(), measurement.len())?;
        self.a_op.check_horizon("SlController::step", t)?;
        self.b_op.check_horizon("SlController::step", t)?;
        self.history.push(DVector::zeros(self.state_dim()));
        let free = self.a_op.component(&self.history);
        let c = measurement - free;
        *self.history.last_mut().expect("just pushed") = c;
        Ok(self.b_op.component(&self.history))
    }

    /// Largest deviation of `A(c)` from the measurements and `B(c)` from the
    /// outputs, recomputed from the recorded history.
    pub fn identity_error(&self, measurements: &[DVector<f64>], outputs: &[DVector<f64>]) -> f64 {
        let a = self.a_op.evaluate_values(&self.history);
        let b = self.b_op.evaluate_values(&self.history);
        let diff = |xs: &[DVector<f64>], ys: &[DVector<f64>]| {
            xs.iter().zip(ys).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
        };
        diff(&a, measurements).max(diff(&b, outputs))
    }
}

/// Feedback law closing the loop in [`simulate_nominal`].
#[derive(Clone, Debug)]
pub enum Feedback {
    /// `u = K(x)` for a causal operator `K`.
    Static(Operator),
    /// A system level controller fed with the state.
    System(SlController),
}

impl From<Operator> for Feedback {
    fn from(op: Operator) -> Self {
        Feedback::Static(op)
    }
}

impl From<SlController> for Feedback {
    fn from(c: SlController) -> Self {
        Feedback::System(c)
    }
}

/// Signals of a simulated loop, all on the same horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopTrace {
    pub w: Sequence,
    pub x: Sequence,
    pub u: Sequence,
    /// Controller internal state; zero for static feedback.
    pub w_hat: Sequence,
    pub v: Sequence,
    pub d: Sequence,
}

impl LoopTrace {
    pub fn horizon(&self) -> usize {
        self.x.horizon()
    }

    /// One row per time step, column groups `w, x, u, w_hat, v, d`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        let groups: [(&str, &Sequence); 6] = [
            ("w", &self.w),
            ("x", &self.x),
            ("u", &self.u),
            ("w_hat", &self.w_hat),
            ("v", &self.v),
            ("d", &self.d),
        ];
        let mut header = vec!["t".to_string()];
        for (name, s) in &groups {
            header.extend((0..s.dim()).map(|i| format!("{name}{i}")));
        }
        wr.write_record(&header)?;
        for t in 0..=self.horizon() {
            let mut row = vec![t.to_string()];
            for (_, s) in &groups {
                row.extend(s[t].iter().map(|v| format_float(*v)));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Forward simulation of `x = F(x, u) + w`, `u = K(x)`.
pub fn simulate_nominal(plant: &Plant, controller: impl Into<Feedback>, w: &Sequence) -> Result<LoopTrace> {
    let mut controller = controller.into();
    let (n, m) = (plant.state_dim(), plant.input_dim());
    check_dim("simulate_nominal (w)", n, w.dim())?;
    match &mut controller {
        Feedback::Static(k) => {
            check_dim("simulate_nominal (K input)", n, k.in_dim())?;
            check_dim("simulate_nominal (K output)", m, k.out_dim())?;
            k.check_horizon("simulate_nominal", w.horizon())?;
        }
        Feedback::System(c) => {
            check_dim("simulate_nominal (SL input)", n, c.state_dim())?;
            check_dim("simulate_nominal (SL output)", m, c.output_dim())?;
            c.reset();
        }
    }
    let mut xs: Vec<DVector<f64>> = Vec::with_capacity(w.len());
    let mut us: Vec<DVector<f64>> = Vec::with_capacity(w.len());
    for t in 0..w.len() {
        let x = if t == 0 {
            w[0].clone()
        } else {
            plant.next_state(&xs, &us) + &w[t]
        };
        xs.push(x);
        let u = match &mut controller {
            Feedback::Static(k) => k.component(&xs),
            Feedback::System(c) => c.step(t, &xs[t])?,
        };
        us.push(u);
    }
    let w_hat = match &controller {
        Feedback::Static(_) => Sequence::zeros(n, w.horizon()),
        Feedback::System(c) => Sequence::new(n, c.history().to_vec())?,
    };
    Ok(LoopTrace {
        w: w.clone(),
        x: Sequence::new(n, xs)?,
        u: Sequence::new(m, us)?,
        w_hat,
        v: Sequence::zeros(n, w.horizon()),
        d: Sequence::zeros(m, w.horizon()),
    })
}

/// Forward simulation of the perturbed loop
/// `x_t = f_t(·) + w_t`, `ŵ_t = x_t + v_t − Ψˣ_t(0, ŵ_{t−1:0})`, `u_t = Ψᵘ_t(ŵ_{t:0}) + d_t`.
pub fn simulate_perturbed(plant: &Plant, psi: &ClmPair, w: &Sequence, v: &Sequence, d: &Sequence) -> Result<LoopTrace> {
    let (n, m) = (plant.state_dim(), plant.input_dim());
    check_dim("simulate_perturbed (Ψ state)", n, psi.state_dim())?;
    check_dim("simulate_perturbed (Ψ input)", m, psi.input_dim())?;
    check_dim("simulate_perturbed (w)", n, w.dim())?;
    check_dim("simulate_perturbed (v)", n, v.dim())?;
    check_dim("simulate_perturbed (d)", m, d.dim())?;
    for s in [v.horizon(), d.horizon()] {
        if s != w.horizon() {
            return Err(SlsError::HorizonMismatch {
                context: "simulate_perturbed",
                expected: w.horizon(),
                actual: s,
            });
        }
    }
    let mut ctrl = SlController::from_clm(psi)?;
    let mut xs: Vec<DVector<f64>> = Vec::with_capacity(w.len());
    let mut us: Vec<DVector<f64>> = Vec::with_capacity(w.len());
    for t in 0..w.len() {
        let x = if t == 0 {
            w[0].clone()
        } else {
            plant.next_state(&xs, &us) + &w[t]
        };
        let b = ctrl.step(t, &(&x + &v[t]))?;
        xs.push(x);
        us.push(b + &d[t]);
    }
    Ok(LoopTrace {
        w: w.clone(),
        x: Sequence::new(n, xs)?,
        u: Sequence::new(m, us)?,
        w_hat: Sequence::new(n, ctrl.history().to_vec())?,
        v: v.clone(),
        d: d.clone(),
    })
}
