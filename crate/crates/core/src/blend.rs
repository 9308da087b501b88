//! Blended system level controllers and the saturation anti-windup wrap.
//!
//! A blend combines `N` linear closed-loop maps `(Rⁱ, Mⁱ)` through pointwise
//! selectors `Gⁱ` with `Σ Gⁱ = I`:
//!
//! ```text
//! Ψˣ = I + Σᵢ (Rⁱ − I) Gⁱ,    Ψᵘ = Σᵢ Mⁱ Gⁱ
//! ```
//!
//! The controller evaluates `w̃ⁱ_t = Gⁱ(ŵ_t)` on the fly from its own history:
//!
//! ```text
//! ŵ_t = x_t − Σᵢ Σ_{k≥2} Rⁱ_{t,k} w̃ⁱ_{t+1−k}
//! u_t = Σᵢ Σ_{k≥1} Mⁱ_{t,k} w̃ⁱ_{t+1−k}
//! ```
//!
//! For the saturated plant `x_t = A x_{t−1} + B sat(u_{t−1}|U) + w_t`, the
//! anti-windup wrap splits `ŵ` into `sat(ŵ|W)`, fed to a CLM whose inputs stay
//! inside `U`, and the excess `ŵ − sat(ŵ|W)`, fed to the truncated open-loop
//! map `R′_{t,k} = A^{k−1}` (`k ≤ T̄`), `M′ = 0`. The internal signal then obeys
//! `ŵ_t = A^T̄ (ŵ_{t−T̄} − sat(ŵ_{t−T̄}|W)) + w_t`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clm::{clm_residual, AffineClm, ClmPair, Plant};
use crate::error::{check_dim, Result, SlsError};
use crate::ltv::FirClm;
use crate::operator::io::format_float;
use crate::operator::{CausalMap, LinearCausalKernel, Norm, Operator, Sequence};
use crate::runtime::{simulate_nominal, LoopTrace, SlController};

const PARTITION_SAMPLES: usize = 64;
const PARTITION_TOL: f64 = 1e-12;
const CONTAINMENT_TOL: f64 = 1e-12;
const CLM_TOL: f64 = 1e-8;

/// Closed convex set containing the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexSet {
    /// `lower ≤ w ≤ upper` coordinatewise.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// `|w| ≤ radius` in the given norm.
    Ball { dim: usize, norm: Norm, radius: f64 },
    /// All of `ℝⁿ`.
    Whole { dim: usize },
}

impl ConvexSet {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let set = ConvexSet::Box { lower, upper };
        set.validate()?;
        Ok(set)
    }

    /// `[−h, h]` per coordinate.
    pub fn symmetric_box(half_widths: &[f64]) -> Result<Self> {
        Self::boxed(half_widths.iter().map(|h| -h).collect(), half_widths.to_vec())
    }

    pub fn ball(dim: usize, norm: Norm, radius: f64) -> Result<Self> {
        let set = ConvexSet::Ball { dim, norm, radius };
        set.validate()?;
        Ok(set)
    }

    pub fn whole(dim: usize) -> Self {
        ConvexSet::Whole { dim }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexSet::Box { lower, upper } => {
                check_dim("ConvexSet::Box (upper)", lower.len(), upper.len())?;
                for (i, (l, u)) in lower.iter().zip(upper).enumerate() {
                    if l.is_nan() || u.is_nan() || l > u {
                        return Err(SlsError::InvalidArgument(format!(
                            "box bounds out of order at coordinate {i}: [{l}, {u}]"
                        )));
                    }
                    if *l > 0.0 || *u < 0.0 {
                        return Err(SlsError::InvalidArgument(format!(
                            "box does not contain the origin at coordinate {i}: [{l}, {u}]"
                        )));
                    }
                }
                Ok(())
            }
            ConvexSet::Ball { radius, .. } => {
                if radius.is_nan() || *radius <= 0.0 {
                    Err(SlsError::InvalidArgument(format!(
                        "ball radius must be positive, got {radius}"
                    )))
                } else {
                    Ok(())
                }
            }
            ConvexSet::Whole { .. } => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Ball { dim, .. } | ConvexSet::Whole { dim } => *dim,
        }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            ConvexSet::Box { lower, upper } => lower.iter().chain(upper).all(|v| v.is_finite()),
            ConvexSet::Ball { radius, .. } => radius.is_finite(),
            ConvexSet::Whole { .. } => false,
        }
    }

    pub fn contains(&self, w: &DVector<f64>, tol: f64) -> bool {
        match self {
            ConvexSet::Box { lower, upper } => w
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol),
            ConvexSet::Ball { norm, radius, .. } => norm.of_vector(w) <= radius + tol,
            ConvexSet::Whole { .. } => true,
        }
    }

    /// `sat(w | S)`: coordinatewise clamp for boxes, radial scaling for balls.
    /// Points already inside are returned unchanged.
    ///
    /// # Panics
    /// When `w` does not have the set's dimension.
    pub fn project(&self, w: &DVector<f64>) -> DVector<f64> {
        assert_eq!(w.len(), self.dim(), "ConvexSet::project dimension mismatch");
        match self {
            ConvexSet::Box { lower, upper } => DVector::from_iterator(
                w.len(),
                w.iter().zip(lower.iter().zip(upper)).map(|(v, (l, u))| v.clamp(*l, *u)),
            ),
            ConvexSet::Ball { norm, radius, .. } => {
                let size = norm.of_vector(w);
                if size <= *radius {
                    w.clone()
                } else {
                    w * (radius / size)
                }
            }
            ConvexSet::Whole { .. } => w.clone(),
        }
    }

    /// Radius of the largest origin-centred `norm`-ball inside the set.
    pub fn eta_bar(&self, norm: Norm) -> f64 {
        match self {
            // Every p-ball of radius η reaches exactly η along each axis and
            // stays inside the ∞-ball of radius η.
            ConvexSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| (-l).min(*u))
                .fold(f64::INFINITY, f64::min),
            ConvexSet::Ball { dim, norm: own, radius } => radius / norm_ratio(*own, norm, *dim),
            ConvexSet::Whole { .. } => f64::INFINITY,
        }
    }

    /// Coordinate bounds, exact for boxes, ∞-balls and `ℝⁿ`.
    pub fn exact_bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            ConvexSet::Box { lower, upper } => Some((lower.clone(), upper.clone())),
            ConvexSet::Ball {
                dim,
                norm: Norm::Inf,
                radius,
            } => Some((vec![-radius; *dim], vec![*radius; *dim])),
            ConvexSet::Ball { .. } => None,
            ConvexSet::Whole { dim } => Some((vec![f64::NEG_INFINITY; *dim], vec![f64::INFINITY; *dim])),
        }
    }

    /// Smallest box containing the set.
    pub fn outer_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            ConvexSet::Ball { dim, radius, .. } => (vec![-radius; *dim], vec![*radius; *dim]),
            _ => self.exact_bounds().expect("boxes and ℝⁿ have exact bounds"),
        }
    }

    fn scale_hint(&self) -> f64 {
        match self {
            ConvexSet::Box { lower, upper } => lower
                .iter()
                .chain(upper)
                .filter(|v| v.is_finite())
                .fold(1e-300, |acc, v| acc.max(v.abs())),
            ConvexSet::Ball { radius, .. } if radius.is_finite() => *radius,
            _ => 1.0,
        }
    }
}

/// `sup_{w ≠ 0} |w|_q / |w|_p` in dimension `n`.
fn norm_ratio(q: Norm, p: Norm, n: usize) -> f64 {
    let inv = |x: Norm| -> f64 {
        match x {
            Norm::One => 1.0,
            Norm::Two => 0.5,
            Norm::Inf => 0.0,
        }
    };
    (n as f64).powf((inv(q) - inv(p)).max(0.0))
}

/// Pointwise selector `w ↦ Gⁱ(w)`.
pub type SelectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Selector family `G¹, …, Gᴺ`.
#[derive(Clone)]
pub enum Selectors {
    /// `Gⁱ = P_{Ωᵢ} − P_{Ωᵢ₋₁}` over nested sets `Ω₁ ⊂ … ⊂ Ω_{N−1}`,
    /// with `P_{Ω₀} = 0` and `P_{Ω_N} = I`.
    Nested(Vec<ConvexSet>),
    /// `G = sat(·|W)`, `G′ = I − G`, with the anti-windup horizon `T̄`.
    SatSplit { set: ConvexSet, t_bar: usize },
    /// Arbitrary pointwise selectors. The partition is only checked by sampling.
    Custom(Vec<SelectorFn>),
}

impl fmt::Debug for Selectors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selectors::Nested(sets) => f.debug_tuple("Nested").field(sets).finish(),
            Selectors::SatSplit { set, t_bar } => f
                .debug_struct("SatSplit")
                .field("set", set)
                .field("t_bar", t_bar)
                .finish(),
            Selectors::Custom(g) => write!(f, "Custom({} selectors)", g.len()),
        }
    }
}

impl Selectors {
    pub fn count(&self) -> usize {
        match self {
            Selectors::Nested(sets) => sets.len() + 1,
            Selectors::SatSplit { .. } => 2,
            Selectors::Custom(g) => g.len(),
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            Selectors::Nested(sets) => sets.first().map(ConvexSet::dim),
            Selectors::SatSplit { set, .. } => Some(set.dim()),
            Selectors::Custom(_) => None,
        }
    }

    /// `(G¹(w), …, Gᴺ(w))`.
    pub fn select(&self, w: &DVector<f64>) -> Vec<DVector<f64>> {
        match self {
            Selectors::Nested(sets) => {
                let mut out = Vec::with_capacity(sets.len() + 1);
                let mut prev = DVector::zeros(w.len());
                for set in sets {
                    let p = set.project(w);
                    out.push(&p - &prev);
                    prev = p;
                }
                out.push(w - prev);
                out
            }
            Selectors::SatSplit { set, .. } => {
                let g = set.project(w);
                let rest = w - &g;
                vec![g, rest]
            }
            Selectors::Custom(g) => g.iter().map(|f| f(w)).collect(),
        }
    }
}

/// One linear CLM pair `(Rⁱ, Mⁱ)` of a blend.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendLevel {
    pub r: LinearCausalKernel,
    pub m: LinearCausalKernel,
}

impl BlendLevel {
    pub fn new(r: LinearCausalKernel, m: LinearCausalKernel) -> Result<Self> {
        check_dim("BlendLevel (R square)", r.out_dim(), r.in_dim())?;
        check_dim("BlendLevel (M input)", r.in_dim(), m.in_dim())?;
        if m.horizon() != r.horizon() {
            return Err(SlsError::HorizonMismatch {
                context: "BlendLevel (M horizon)",
                expected: r.horizon(),
                actual: m.horizon(),
            });
        }
        if !r.is_identity_leading(1e-12) {
            return Err(SlsError::InvalidArgument(
                "blend level R must have identity leading blocks".into(),
            ));
        }
        Ok(Self { r, m })
    }

    /// Linear part of an FIR CLM; offsets must vanish.
    pub fn from_clm(clm: &FirClm) -> Result<Self> {
        if clm.r_offset.iter().chain(clm.m_offset.iter()).any(|v| v.amax() != 0.0) {
            return Err(SlsError::Unsupported(
                "blend levels must be linear (zero offsets)".into(),
            ));
        }
        Self::new(clm.r.clone(), clm.m.clone())
    }
}

/// Levels plus the selector family that blends them.
#[derive(Clone, Debug)]
pub struct BlendSpec {
    levels: Vec<BlendLevel>,
    selectors: Selectors,
    partition_deviation: f64,
}

impl BlendSpec {
    /// Validates dimensions, nesting and the partition `Σ Gⁱ(w) = w` on sampled points.
    pub fn new(levels: Vec<BlendLevel>, selectors: Selectors) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| SlsError::InvalidArgument("a blend needs at least one level".into()))?;
        let (n, m, h) = (first.r.out_dim(), first.m.out_dim(), first.r.horizon());
        for level in &levels {
            check_dim("BlendSpec (level state)", n, level.r.out_dim())?;
            check_dim("BlendSpec (level input)", m, level.m.out_dim())?;
            if level.r.horizon() != h {
                return Err(SlsError::HorizonMismatch {
                    context: "BlendSpec (level horizon)",
                    expected: h,
                    actual: level.r.horizon(),
                });
            }
        }
        check_dim("BlendSpec (selector count)", levels.len(), selectors.count())?;
        if let Some(d) = selectors.dim() {
            check_dim("BlendSpec (selector sets)", n, d)?;
        }
        match &selectors {
            Selectors::Nested(sets) => {
                for s in sets {
                    s.validate()?;
                    check_dim("BlendSpec (nested set)", n, s.dim())?;
                    if !s.is_bounded() {
                        return Err(SlsError::InvalidArgument("nested selector sets must be bounded".into()));
                    }
                }
                check_nesting(sets)?;
            }
            Selectors::SatSplit { set, t_bar } => {
                set.validate()?;
                if *t_bar == 0 {
                    return Err(SlsError::InvalidArgument(
                        "anti-windup horizon T̄ must be at least 1".into(),
                    ));
                }
            }
            Selectors::Custom(_) => {}
        }
        let partition_deviation = partition_deviation(&selectors, n, scale_of(&selectors))?;
        if partition_deviation > PARTITION_TOL {
            return Err(SlsError::PartitionViolation(partition_deviation));
        }
        Ok(Self {
            levels,
            selectors,
            partition_deviation,
        })
    }

    pub fn levels(&self) -> &[BlendLevel] {
        &self.levels
    }

    pub fn selectors(&self) -> &Selectors {
        &self.selectors
    }

    pub fn state_dim(&self) -> usize {
        self.levels[0].r.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.levels[0].m.out_dim()
    }

    pub fn horizon(&self) -> usize {
        self.levels[0].r.horizon()
    }

    /// Largest relative deviation of `Σ Gⁱ(w)` from `w` seen at construction.
    pub fn partition_deviation(&self) -> f64 {
        self.partition_deviation
    }

    /// False when the partition rests on sampling alone (custom selectors).
    pub fn partition_is_structural(&self) -> bool {
        !matches!(self.selectors, Selectors::Custom(_))
    }

    /// `(W, T̄)` for sat-split blends.
    pub fn sat_split(&self) -> Option<(&ConvexSet, usize)> {
        match &self.selectors {
            Selectors::SatSplit { set, t_bar } => Some((set, *t_bar)),
            _ => None,
        }
    }
}

fn scale_of(selectors: &Selectors) -> f64 {
    match selectors {
        Selectors::Nested(sets) => sets.iter().map(ConvexSet::scale_hint).fold(1e-300, f64::max),
        Selectors::SatSplit { set, .. } => set.scale_hint(),
        Selectors::Custom(_) => 1.0,
    }
}

fn sample_points(n: usize, scale: f64, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..PARTITION_SAMPLES)
        .map(|i| {
            let dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let size = scale * 3.0 * (i as f64 + 1.0) / PARTITION_SAMPLES as f64;
            let norm = dir.norm();
            if norm == 0.0 {
                dir
            } else {
                dir * (size / norm)
            }
        })
        .collect()
}

fn partition_deviation(selectors: &Selectors, n: usize, scale: f64) -> Result<f64> {
    let mut worst = 0.0_f64;
    for w in sample_points(n, scale, 0xb1e4d) {
        let parts = selectors.select(&w);
        let mut sum = DVector::zeros(n);
        for p in &parts {
            check_dim("selector output", n, p.len())?;
            sum += p;
        }
        worst = worst.max((sum - &w).amax() / (1.0 + w.amax()));
    }
    Ok(worst)
}

fn check_nesting(sets: &[ConvexSet]) -> Result<()> {
    for (i, pair) in sets.windows(2).enumerate() {
        let (inner, outer) = (&pair[0], &pair[1]);
        for w in sample_points(inner.dim(), inner.scale_hint(), 0x4e57 + i as u64) {
            let p = inner.project(&w);
            if !outer.contains(&p, PARTITION_TOL * (1.0 + p.amax())) {
                return Err(SlsError::InvalidArgument(format!(
                    "selector sets {} and {} are not nested",
                    i + 1,
                    i + 2
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Channel {
    State,
    Input,
}

struct BlendMap {
    spec: Arc<BlendSpec>,
    channel: Channel,
}

impl BlendMap {
    fn kernel<'a>(&self, level: &'a BlendLevel) -> &'a LinearCausalKernel {
        match self.channel {
            Channel::State => &level.r,
            Channel::Input => &level.m,
        }
    }

    fn lags_at(&self, t: usize) -> usize {
        self.spec
            .levels
            .iter()
            .map(|l| self.kernel(l).lags_at(t))
            .max()
            .unwrap_or(0)
    }

    /// Output at `t`; `sel(j)` returns the selections of the input at time `j`.
    fn output<'a>(&self, t: usize, current: &DVector<f64>, sel: impl Fn(usize) -> &'a [DVector<f64>]) -> DVector<f64> {
        let (mut out, first) = match self.channel {
            Channel::State => (current.clone(), 2),
            Channel::Input => (DVector::zeros(self.spec.input_dim()), 1),
        };
        for (i, level) in self.spec.levels.iter().enumerate() {
            let kernel = self.kernel(level);
            for k in first..=kernel.lags_at(t) {
                let block = kernel.block(t, k).expect("stored lag");
                out.gemv(1.0, block, &sel(t + 1 - k)[i], 1.0);
            }
        }
        out
    }
}

impl CausalMap for BlendMap {
    fn in_dim(&self) -> usize {
        self.spec.state_dim()
    }

    fn out_dim(&self) -> usize {
        match self.channel {
            Channel::State => self.spec.state_dim(),
            Channel::Input => self.spec.input_dim(),
        }
    }

    fn horizon(&self) -> Option<usize> {
        Some(self.spec.horizon())
    }

    fn component(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let t = history.len() - 1;
        let start = t + 1 - self.lags_at(t).min(t + 1);
        let selected: Vec<Vec<DVector<f64>>> = history[start..].iter().map(|w| self.spec.selectors.select(w)).collect();
        self.output(t, &history[t], |j| &selected[j - start])
    }

    fn evaluate_all(&self, input: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let selected: Vec<Vec<DVector<f64>>> = input.iter().map(|w| self.spec.selectors.select(w)).collect();
        (0..input.len())
            .map(|t| self.output(t, &input[t], |j| &selected[j]))
            .collect()
    }
}

/// The blended map `Ψ = (I + Σ (Rⁱ − I)Gⁱ, Σ MⁱGⁱ)`.
pub fn blended_clm(spec: &BlendSpec) -> Result<ClmPair> {
    let spec = Arc::new(spec.clone());
    let psi_x = Operator::new(BlendMap {
        spec: spec.clone(),
        channel: Channel::State,
    });
    let psi_u = Operator::new(BlendMap {
        spec,
        channel: Channel::Input,
    });
    ClmPair::new(psi_x, psi_u)
}

/// SL(Ψˣ, Ψᵘ) for the blended map.
pub fn blended_controller(spec: &BlendSpec) -> Result<SlController> {
    SlController::from_clm(&blended_clm(spec)?)
}

/// On-disk form of a [`BlendSpec`]: set definitions plus one CLM directory per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendFile {
    /// Level directories relative to the file, in blend order.
    pub levels: Vec<String>,
    pub selectors: SelectorFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectorFile {
    Nested { sets: Vec<ConvexSet> },
    SatSplit { set: ConvexSet, t_bar: usize },
}

impl BlendSpec {
    /// Writes `blend.json` and a `level{i}` CLM directory per level into `dir`.
    /// Custom selectors have no file form.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let selectors = match &self.selectors {
            Selectors::Nested(sets) => SelectorFile::Nested { sets: sets.clone() },
            Selectors::SatSplit { set, t_bar } => SelectorFile::SatSplit {
                set: set.clone(),
                t_bar: *t_bar,
            },
            Selectors::Custom(_) => {
                return Err(SlsError::Unsupported("custom selectors cannot be saved".into()));
            }
        };
        std::fs::create_dir_all(dir)?;
        let mut levels = Vec::with_capacity(self.levels.len());
        for (i, level) in self.levels.iter().enumerate() {
            let name = format!("level{i}");
            AffineClm::linear(level.r.clone(), level.m.clone())?.save(&dir.join(&name))?;
            levels.push(name);
        }
        let file = BlendFile { levels, selectors };
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("blend.json"))?), &file)?;
        Ok(())
    }

    /// Reads a directory written by [`BlendSpec::save`] and re-validates it.
    pub fn load(dir: &Path) -> Result<Self> {
        let file: BlendFile = serde_json::from_reader(BufReader::new(File::open(dir.join("blend.json"))?))?;
        let levels = file
            .levels
            .iter()
            .map(|name| BlendLevel::from_clm(&AffineClm::load(&dir.join(name))?))
            .collect::<Result<Vec<_>>>()?;
        let selectors = match file.selectors {
            SelectorFile::Nested { sets } => Selectors::Nested(sets),
            SelectorFile::SatSplit { set, t_bar } => Selectors::SatSplit { set, t_bar },
        };
        Self::new(levels, selectors)
    }
}

/// Level residual kernels `Δⁱ = Fˣ Rⁱ + Fᵘ Mⁱ + I − Rⁱ` of a linear plant.
pub fn level_residual_kernels(plant: &Plant, spec: &BlendSpec) -> Result<Vec<LinearCausalKernel>> {
    check_dim("level residual (state)", plant.state_dim(), spec.state_dim())?;
    check_dim("level residual (input)", plant.input_dim(), spec.input_dim())?;
    let (fx, fu) = plant
        .linear_kernels(spec.horizon())
        .ok_or_else(|| SlsError::Unsupported("level residuals need a linear plant".into()))?;
    spec.levels
        .iter()
        .map(|level| level_residual(&fx, &fu, level))
        .collect()
}

fn level_residual(fx: &LinearCausalKernel, fu: &LinearCausalKernel, level: &BlendLevel) -> Result<LinearCausalKernel> {
    let n = level.r.out_dim();
    let identity = LinearCausalKernel::identity(n, level.r.horizon(), Some(1));
    fx.compose(&level.r)?
        .add(&fu.compose(&level.m)?)?
        .add(&identity)?
        .sub(&level.r)
}

/// Outcome of [`blend_residual_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlendResidualReport {
    /// Largest block entry of each `Δⁱ`.
    pub level_residuals: Vec<f64>,
    /// Largest entry of `Δ[F, Ψ](w)` over all samples.
    pub max_residual: f64,
}

impl BlendResidualReport {
    pub fn levels_exact(&self, tol: f64) -> bool {
        self.level_residuals.iter().all(|r| *r <= tol)
    }

    /// Header `level,max_abs_residual`; a final `blend` row for the sampled closed loop.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(["level", "max_abs_residual"])?;
        for (i, r) in self.level_residuals.iter().enumerate() {
            wr.write_record([i.to_string(), format_float(*r)])?;
        }
        wr.write_record(["blend".to_string(), format_float(self.max_residual)])?;
        wr.flush()?;
        Ok(())
    }
}

pub fn blend_residual_check(plant: &Plant, spec: &BlendSpec, samples: &[Sequence]) -> Result<BlendResidualReport> {
    let level_residuals = level_residual_kernels(plant, spec)?
        .iter()
        .map(LinearCausalKernel::max_abs)
        .collect();
    let psi = blended_clm(spec)?;
    let mut max_residual = 0.0_f64;
    for w in samples {
        let r = clm_residual(plant, &psi, w)?;
        max_residual = max_residual.max(r.iter().map(|v| v.amax()).fold(0.0, f64::max));
    }
    Ok(BlendResidualReport {
        level_residuals,
        max_residual,
    })
}

/// Disturbance, state and input constraint sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSets {
    pub w: ConvexSet,
    pub x: ConvexSet,
    pub u: ConvexSet,
}

/// Truncated open-loop map `R′_{t,k} = A^{k−1}` for `k ≤ T̄`, `M′ = 0`.
pub fn open_loop_level(a: &DMatrix<f64>, input_dim: usize, horizon: usize, t_bar: usize) -> Result<BlendLevel> {
    if !a.is_square() {
        return Err(SlsError::InvalidArgument("A must be square".into()));
    }
    if t_bar == 0 {
        return Err(SlsError::InvalidArgument(
            "anti-windup horizon T̄ must be at least 1".into(),
        ));
    }
    let n = a.nrows();
    let mut powers = vec![DMatrix::identity(n, n)];
    for k in 1..t_bar {
        powers.push(a * &powers[k - 1]);
    }
    let r = LinearCausalKernel::from_fn(n, n, horizon, Some(t_bar), |_, k| powers[k - 1].clone());
    let m = LinearCausalKernel::zeros(input_dim, n, horizon, Some(t_bar));
    BlendLevel::new(r, m)
}

/// Sat-split blend of `(R, M)` with the open-loop level, after checking that
/// `(R, M)` is a CLM of `(A, B)` and maps `W` into `X × U`.
///
/// Containment is checked exactly for boxes and ∞-balls. Other balls for `W`
/// are replaced by their bounding box, which is sufficient.
pub fn antiwindup_wrap(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    rm: &FirClm,
    sets: &ConstraintSets,
    t_bar: usize,
) -> Result<BlendSpec> {
    let plant = Plant::lti(a.clone(), b.clone())?;
    let level = BlendLevel::from_clm(rm)?;
    check_dim("antiwindup_wrap (state)", a.nrows(), rm.state_dim())?;
    check_dim("antiwindup_wrap (input)", b.ncols(), rm.input_dim())?;
    check_dim("antiwindup_wrap (W)", a.nrows(), sets.w.dim())?;
    for s in [&sets.w, &sets.x, &sets.u] {
        s.validate()?;
    }
    let (fx, fu) = plant.linear_kernels(rm.horizon()).expect("LTI plant is linear");
    let residual = level_residual(&fx, &fu, &level)?.max_abs();
    if residual > CLM_TOL {
        return Err(SlsError::InvalidArgument(format!(
            "(R, M) is not a CLM of (A, B): residual {residual:e}"
        )));
    }
    let (lo, hi) = sets.w.outer_box();
    let w_box = ConvexSet::Box { lower: lo, upper: hi };
    let report = verify_containment(rm, &w_box, &sets.x, &sets.u)?;
    if !report.is_contained() {
        return Err(SlsError::Containment(format!(
            "worst margin {:e} (R(W) ⊂ X and M(W) ⊂ U required)",
            report.min_margin()
        )));
    }
    let open = open_loop_level(a, b.ncols(), rm.horizon(), t_bar)?;
    BlendSpec::new(
        vec![level, open],
        Selectors::SatSplit {
            set: sets.w.clone(),
            t_bar,
        },
    )
}

/// Closed loop of the saturated plant `x_t = A x_{t−1} + B sat(u_{t−1}|U) + w_t`
/// with the blended controller. `trace.u` holds the unsaturated controller output.
pub fn simulate_saturated(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u_set: &ConvexSet,
    spec: &BlendSpec,
    w: &Sequence,
) -> Result<LoopTrace> {
    Plant::lti(a.clone(), b.clone())?;
    check_dim("simulate_saturated (U)", b.ncols(), u_set.dim())?;
    let (a, b, u_set) = (a.clone(), b.clone(), u_set.clone());
    let plant = Plant::nonlinear(a.nrows(), b.ncols(), move |xs, us| {
        let applied = u_set.project(&us[us.len() - 1]);
        &a * &xs[xs.len() - 1] + &b * applied
    });
    simulate_nominal(&plant, blended_controller(spec)?, w)
}

/// Direct recursion `ŵ_t = A^T̄ (ŵ_{t−T̄} − sat(ŵ_{t−T̄}|W)) + w_t`.
pub fn saturated_internal_dynamics(spec: &BlendSpec, a: &DMatrix<f64>, w: &Sequence) -> Result<Sequence> {
    let (set, t_bar) = spec
        .sat_split()
        .ok_or_else(|| SlsError::InvalidArgument("internal dynamics need a sat-split blend".into()))?;
    check_dim("saturated_internal_dynamics (A)", set.dim(), a.nrows())?;
    check_dim("saturated_internal_dynamics (w)", set.dim(), w.dim())?;
    let a_t = a.pow(t_bar as u32);
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(w.len());
    for t in 0..w.len() {
        let mut next = w[t].clone();
        if t >= t_bar {
            let past = &out[t - t_bar];
            next += &a_t * (past - set.project(past));
        }
        out.push(next);
    }
    Sequence::new(w.dim(), out)
}

/// Which part of the anti-windup lemma produced a bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AwpBranch {
    Global,
    Local,
}

impl fmt::Display for AwpBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AwpBranch::Global => "global",
            AwpBranch::Local => "local",
        })
    }
}

/// Result of [`awp_bound`].
#[derive(Clone, Debug, PartialEq)]
pub enum AwpOutcome {
    Bound {
        branch: AwpBranch,
        /// `|A^T̄|` in the induced norm.
        contraction: f64,
        /// `1/(1 − |A^T̄|)` or `1/(1 − γ)`.
        gain: f64,
        /// `gain · ‖w‖_p`.
        bound: f64,
        /// Largest admissible `‖w‖_p` (infinite for the global branch).
        admissible: f64,
    },
    Infeasible {
        contraction: f64,
        /// Local admissible radius when a `γ` was supplied.
        admissible: Option<f64>,
    },
}

impl AwpOutcome {
    pub fn bound(&self) -> Option<f64> {
        match self {
            AwpOutcome::Bound { bound, .. } => Some(*bound),
            AwpOutcome::Infeasible { .. } => None,
        }
    }

    pub fn branch(&self) -> Option<AwpBranch> {
        match self {
            AwpOutcome::Bound { branch, .. } => Some(*branch),
            AwpOutcome::Infeasible { .. } => None,
        }
    }
}

/// Bound on `‖ŵ‖_p` for the anti-windup loop.
///
/// `norm` is the vector norm used for `|A^T̄|`, `η̄` and inside `‖w‖_p`.
/// The global branch applies when `|A^T̄| < 1`. Otherwise the local branch
/// needs `0 ≤ γ < min{1, |A^T̄|}` and `‖w‖_p ≤ (1−γ)|A^T̄|η̄/(|A^T̄| − γ)`.
pub fn awp_bound(
    a: &DMatrix<f64>,
    t_bar: usize,
    w_set: &ConvexSet,
    norm: Norm,
    w_norm: f64,
    gamma: Option<f64>,
) -> Result<AwpOutcome> {
    check_dim("awp_bound (W)", a.nrows(), w_set.dim())?;
    let eta = w_set.eta_bar(norm);
    if eta.is_nan() || eta <= 0.0 {
        return Err(SlsError::InvalidArgument("η̄ must be positive".into()));
    }
    let contraction = norm.induced(&a.pow(t_bar as u32));
    if contraction < 1.0 {
        let gain = 1.0 / (1.0 - contraction);
        return Ok(AwpOutcome::Bound {
            branch: AwpBranch::Global,
            contraction,
            gain,
            bound: gain * w_norm,
            admissible: f64::INFINITY,
        });
    }
    let Some(gamma) = gamma else {
        return Ok(AwpOutcome::Infeasible {
            contraction,
            admissible: None,
        });
    };
    if !(0.0..1.0_f64.min(contraction)).contains(&gamma) {
        return Err(SlsError::InvalidArgument(format!(
            "γ = {gamma} outside [0, min(1, |A^T̄|))"
        )));
    }
    let admissible = (1.0 - gamma) * contraction * eta / (contraction - gamma);
    if w_norm <= admissible {
        let gain = 1.0 / (1.0 - gamma);
        Ok(AwpOutcome::Bound {
            branch: AwpBranch::Local,
            contraction,
            gain,
            bound: gain * w_norm,
            admissible,
        })
    } else {
        Ok(AwpOutcome::Infeasible {
            contraction,
            admissible: Some(admissible),
        })
    }
}

/// Smallest `T̄ ≤ t_max` with `|A^T̄| < 1` in the induced norm.
pub fn min_contraction_horizon(a: &DMatrix<f64>, norm: Norm, t_max: usize) -> Option<usize> {
    if !a.is_square() || t_max == 0 {
        return None;
    }
    // The spectral radius bounds every induced norm of every power from below.
    let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    if rho >= 1.0 {
        return None;
    }
    let mut power = a.clone();
    for t in 1..=t_max {
        if norm.induced(&power) < 1.0 {
            return Some(t);
        }
        power = &power * a;
    }
    None
}

/// Worst-case margins of `R(W) ⊂ X` and `M(W) ⊂ U`, one per constraint row.
/// Positive means slack.
#[derive(Clone, Debug, PartialEq)]
pub struct ContainmentReport {
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
}

impl ContainmentReport {
    pub fn min_margin(&self) -> f64 {
        self.x_lower
            .iter()
            .chain(&self.x_upper)
            .chain(&self.u_lower)
            .chain(&self.u_upper)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_contained(&self) -> bool {
        self.min_margin() >= -CONTAINMENT_TOL
    }

    /// CSV with header `channel,row,lower_margin,upper_margin`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["channel", "row", "lower_margin", "upper_margin"])?;
        for (name, lower, upper) in [("x", &self.x_lower, &self.x_upper), ("u", &self.u_lower, &self.u_upper)] {
            for (i, (l, u)) in lower.iter().zip(upper).enumerate() {
                w.write_record([name.to_string(), i.to_string(), format_float(*l), format_float(*u)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Coordinatewise range of `R(w)` and `M(w)` over all `w` with every `w_t ∈ W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBounds {
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
}

/// Exact image bounds for a box or ∞-ball `W`: each output row is extremized
/// over the vertices of `W`, every time step and lag independently.
pub fn image_bounds(rm: &FirClm, w: &ConvexSet) -> Result<ImageBounds> {
    let (wl, wu) = w
        .exact_bounds()
        .ok_or_else(|| SlsError::Unsupported("image bounds need a box or ∞-ball (W)".into()))?;
    check_dim("image_bounds (W)", rm.state_dim(), wl.len())?;
    let (x_lower, x_upper) = channel_range(&rm.r, &rm.r_offset, &wl, &wu);
    let (u_lower, u_upper) = channel_range(&rm.m, &rm.m_offset, &wl, &wu);
    Ok(ImageBounds {
        x_lower,
        x_upper,
        u_lower,
        u_upper,
    })
}

/// Exact check of `∀w ∈ W: R(w) ⊂ X, M(w) ⊂ U` for boxes and ∞-balls.
pub fn verify_containment(rm: &FirClm, w: &ConvexSet, x: &ConvexSet, u: &ConvexSet) -> Result<ContainmentReport> {
    let bounds = |s: &ConvexSet, name: &str| {
        s.exact_bounds()
            .ok_or_else(|| SlsError::Unsupported(format!("containment needs boxes or ∞-balls ({name})")))
    };
    bounds(w, "W")?;
    let (xl, xu) = bounds(x, "X")?;
    let (ul, uu) = bounds(u, "U")?;
    check_dim("verify_containment (X)", rm.state_dim(), xl.len())?;
    check_dim("verify_containment (U)", rm.input_dim(), ul.len())?;
    let img = image_bounds(rm, w)?;
    let margin = |set: &[f64], reach: &[f64], upper: bool| -> Vec<f64> {
        set.iter()
            .zip(reach)
            .map(|(s, r)| match (s.is_finite(), upper) {
                (false, _) => f64::INFINITY,
                (true, true) => s - r,
                (true, false) => r - s,
            })
            .collect()
    };
    Ok(ContainmentReport {
        x_lower: margin(&xl, &img.x_lower, false),
        x_upper: margin(&xu, &img.x_upper, true),
        u_lower: margin(&ul, &img.u_lower, false),
        u_upper: margin(&uu, &img.u_upper, true),
    })
}

fn channel_range(kernel: &LinearCausalKernel, offset: &Sequence, wl: &[f64], wu: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rows = kernel.out_dim();
    let mut lowest = vec![f64::INFINITY; rows];
    let mut highest = vec![f64::NEG_INFINITY; rows];
    for t in 0..=kernel.horizon() {
        let mut sup: Vec<f64> = (0..rows).map(|i| offset[t][i]).collect();
        let mut inf = sup.clone();
        for k in 1..=kernel.lags_at(t) {
            let block = kernel.block(t, k).expect("stored lag");
            for i in 0..rows {
                for j in 0..kernel.in_dim() {
                    let c = block[(i, j)];
                    if c == 0.0 {
                        continue;
                    }
                    let (a, b) = (c * wl[j], c * wu[j]);
                    sup[i] += a.max(b);
                    inf[i] += a.min(b);
                }
            }
        }
        for i in 0..rows {
            highest[i] = highest[i].max(sup[i]);
            lowest[i] = lowest[i].min(inf[i]);
        }
    }
    (lowest, highest)
}

/// Outcome of [`convergence_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    /// Smallest `t′` such that the saturation tail `R′(ŵ − sat(ŵ|W))`
    /// vanishes for every `t > t′`; `None` if it is still active at the end.
    pub t_prime: Option<usize>,
    /// Largest distance of `R(sat(ŵ|W))_t` from `X` over `t > t′`.
    pub max_violation_after: f64,
}

/// Splits `x = R(sat(ŵ|W)) + R′(ŵ − sat(ŵ|W))` for a sat-split blend and
/// locates the time after which only the first term remains.
pub fn convergence_check(spec: &BlendSpec, w_hat: &Sequence, x_set: &ConvexSet) -> Result<ConvergenceReport> {
    let (set, _) = spec
        .sat_split()
        .ok_or_else(|| SlsError::InvalidArgument("convergence check needs a sat-split blend".into()))?;
    check_dim("convergence_check (ŵ)", spec.state_dim(), w_hat.dim())?;
    check_dim("convergence_check (X)", spec.state_dim(), x_set.dim())?;
    let sat = w_hat.map(|v| set.project(v));
    let excess = w_hat.sub(&sat)?;
    let levels = spec.levels();
    let s = levels[0].r.apply(sat.values());
    let tail = levels[1].r.apply(excess.values());
    let last_active = tail.iter().rposition(|v| v.iter().any(|x| *x != 0.0));
    let t_prime = match last_active {
        None => Some(0),
        Some(t) if t + 1 == tail.len() => None,
        Some(t) => Some(t),
    };
    let max_violation_after = match t_prime {
        None => f64::NAN,
        Some(tp) => s
            .iter()
            .skip(tp + 1)
            .map(|v| (v - x_set.project(v)).amax())
            .fold(0.0, f64::max),
    };
    Ok(ConvergenceReport {
        t_prime,
        max_violation_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clm::AffineClm;
    use crate::ltv::{synthesize_h2_fir, LtvModel};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn deadbeat(a: f64, h: usize) -> FirClm {
        // Scalar x⁺ = a x + u with u = −a x: R = {1}, M = {−a}.
        let r = LinearCausalKernel::identity(1, h, Some(2));
        let m = LinearCausalKernel::from_fn(1, 1, h, Some(2), |_, k| m1(if k == 1 { -a } else { 0.0 }));
        AffineClm::linear(r, m).unwrap()
    }

    fn scalar_sets(w: f64, x: f64, u: f64) -> ConstraintSets {
        ConstraintSets {
            w: ConvexSet::symmetric_box(&[w]).unwrap(),
            x: ConvexSet::symmetric_box(&[x]).unwrap(),
            u: ConvexSet::symmetric_box(&[u]).unwrap(),
        }
    }

    #[test]
    fn projection_examples() {
        let ball = ConvexSet::ball(2, Norm::Two, 1.0).unwrap();
        let p = ball.project(&v(&[3.0, 4.0]));
        assert!((p - v(&[0.6, 0.8])).amax() < 1e-15);
        let inside = v(&[0.1, -0.2]);
        assert_eq!(ball.project(&inside), inside);
        let boxed = ConvexSet::boxed(vec![-1.0, -2.0], vec![3.0, 0.5]).unwrap();
        assert_eq!(boxed.project(&v(&[5.0, -5.0])), v(&[3.0, -2.0]));
    }

    #[test]
    fn saturation_distance_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for norm in Norm::ALL {
            let ball = ConvexSet::ball(3, norm, 0.7).unwrap();
            let bx = ConvexSet::boxed(vec![-0.5, -1.0, -2.0], vec![1.0, 0.8, 0.6]).unwrap();
            for _ in 0..200 {
                let w = DVector::from_fn(3, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
                let dist = norm.of_vector(&(ball.project(&w) - &w));
                let expect = (norm.of_vector(&w) - ball.eta_bar(norm)).max(0.0);
                if norm == Norm::Two {
                    assert!((dist - expect).abs() < 1e-12);
                }
                assert!(dist <= expect + 1e-12);
                let dist = norm.of_vector(&(bx.project(&w) - &w));
                assert!(dist <= (norm.of_vector(&w) - bx.eta_bar(norm)).max(0.0) + 1e-12);
            }
        }
    }

    #[test]
    fn eta_bar_values() {
        let b2 = ConvexSet::ball(4, Norm::Two, 2.0).unwrap();
        assert_eq!(b2.eta_bar(Norm::Two), 2.0);
        assert!((b2.eta_bar(Norm::Inf) - 1.0).abs() < 1e-15);
        assert_eq!(b2.eta_bar(Norm::One), 2.0);
        let bx = ConvexSet::boxed(vec![-0.3, -2.0], vec![1.0, 0.4]).unwrap();
        for n in Norm::ALL {
            assert_eq!(bx.eta_bar(n), 0.3);
        }
        assert_eq!(ConvexSet::whole(2).eta_bar(Norm::Two), f64::INFINITY);
    }

    #[test]
    fn set_validation() {
        assert!(ConvexSet::boxed(vec![0.5], vec![1.0]).is_err());
        assert!(ConvexSet::boxed(vec![1.0], vec![-1.0]).is_err());
        assert!(ConvexSet::ball(2, Norm::Two, 0.0).is_err());
        let json = serde_json::to_string(&ConvexSet::ball(2, Norm::Inf, 1.5).unwrap()).unwrap();
        let back: ConvexSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ConvexSet::ball(2, Norm::Inf, 1.5).unwrap());
    }

    fn random_clm(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: usize,
        h: usize,
        fir: usize,
    ) -> (DMatrix<f64>, DMatrix<f64>, FirClm) {
        let a = DMatrix::from_fn(n, n, |_, _| 0.6 * rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let model = LtvModel::time_invariant(a.clone(), b.clone(), h).unwrap();
        (a, b, synthesize_h2_fir(&model, fir).unwrap())
    }

    #[test]
    fn single_level_reduces_to_linear_controller() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, b, clm) = random_clm(&mut rng, 2, 1, 20, 5);
        let identity: SelectorFn = Arc::new(|w: &DVector<f64>| w.clone());
        let spec = BlendSpec::new(
            vec![BlendLevel::from_clm(&clm).unwrap()],
            Selectors::Custom(vec![identity]),
        )
        .unwrap();
        assert!(!spec.partition_is_structural());
        let plant = Plant::lti(a, b).unwrap();
        let w = Sequence::from_fn(2, 20, |_| {
            DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal))
        });
        let blended = simulate_nominal(&plant, blended_controller(&spec).unwrap(), &w).unwrap();
        let linear = simulate_nominal(&plant, SlController::from_clm(&ClmPair::from_affine(clm)).unwrap(), &w).unwrap();
        assert!(blended.x.max_abs_diff(&linear.x) < 1e-13);
        assert!(blended.u.max_abs_diff(&linear.u) < 1e-13);
    }

    #[test]
    fn partition_violation_rejected() {
        let clm = deadbeat(1.0, 5);
        let half: SelectorFn = Arc::new(|w: &DVector<f64>| w * 0.5);
        let err = BlendSpec::new(vec![BlendLevel::from_clm(&clm).unwrap()], Selectors::Custom(vec![half])).unwrap_err();
        assert!(matches!(err, SlsError::PartitionViolation(_)));
    }

    #[test]
    fn nesting_checked() {
        let clm = deadbeat(1.0, 5);
        let lvl = BlendLevel::from_clm(&clm).unwrap();
        let sets = vec![
            ConvexSet::ball(1, Norm::Two, 2.0).unwrap(),
            ConvexSet::ball(1, Norm::Two, 1.0).unwrap(),
        ];
        assert!(BlendSpec::new(vec![lvl.clone(), lvl.clone(), lvl], Selectors::Nested(sets)).is_err());
    }

    #[test]
    fn nested_blend_inside_inner_set_matches_level_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, fast) = random_clm(&mut rng, 2, 2, 30, 4);
        let model = LtvModel::time_invariant(a.clone(), b.clone(), 30).unwrap();
        let slow = synthesize_h2_fir(&model, 8).unwrap();
        let spec = BlendSpec::new(
            vec![
                BlendLevel::from_clm(&fast).unwrap(),
                BlendLevel::from_clm(&slow).unwrap(),
            ],
            Selectors::Nested(vec![ConvexSet::ball(2, Norm::Two, 1.0).unwrap()]),
        )
        .unwrap();
        let plant = Plant::lti(a, b).unwrap();
        let w = Sequence::from_fn(2, 30, |_| DVector::from_fn(2, |_, _| rng.random_range(-0.3..0.3)));
        let blended = simulate_nominal(&plant, blended_controller(&spec).unwrap(), &w).unwrap();
        let linear =
            simulate_nominal(&plant, SlController::from_clm(&ClmPair::from_affine(fast)).unwrap(), &w).unwrap();
        assert_eq!(blended.x, linear.x);
        assert_eq!(blended.u, linear.u);
        let report = blend_residual_check(&plant, &spec, &[w]).unwrap();
        assert!(report.levels_exact(1e-9));
        assert!(report.max_residual < 1e-9);
    }

    #[test]
    fn spec_files_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b, fast) = random_clm(&mut rng, 2, 1, 20, 3);
        let slow = synthesize_h2_fir(&LtvModel::time_invariant(a.clone(), b.clone(), 20).unwrap(), 6).unwrap();
        let nested = BlendSpec::new(
            vec![BlendLevel::from_clm(&fast).unwrap(), BlendLevel::from_clm(&slow).unwrap()],
            Selectors::Nested(vec![ConvexSet::symmetric_box(&[0.5, 0.5]).unwrap()]),
        )
        .unwrap();
        let dir = tempfile::TempDir::new().unwrap();
        nested.save(dir.path()).unwrap();
        let back = BlendSpec::load(dir.path()).unwrap();
        assert_eq!(back.levels(), nested.levels());
        let plant = Plant::lti(a.clone(), b.clone()).unwrap();
        let w = Sequence::from_fn(2, 20, |_| DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)));
        let x0 = simulate_nominal(&plant, blended_controller(&nested).unwrap(), &w).unwrap();
        let x1 = simulate_nominal(&plant, blended_controller(&back).unwrap(), &w).unwrap();
        assert_eq!(x0, x1);

        let text = std::fs::read_to_string(dir.path().join("blend.json")).unwrap();
        assert!(text.contains("\"kind\": \"nested\""));
        assert!(text.contains("level1"));

        let identity: SelectorFn = Arc::new(|w: &DVector<f64>| w.clone());
        let custom =
            BlendSpec::new(vec![BlendLevel::from_clm(&fast).unwrap()], Selectors::Custom(vec![identity])).unwrap();
        assert!(matches!(custom.save(dir.path()), Err(SlsError::Unsupported(_))));

        let mut csv = Vec::new();
        blend_residual_check(&plant, &nested, &[w]).unwrap().write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "level,max_abs_residual");
        assert_eq!(rows.len(), 4);
        assert!(rows[3].starts_with("blend,"));
    }

    #[test]
    fn sat_split_spec_round_trips() {
        let clm = deadbeat(0.5, 12);
        let sets = scalar_sets(1.0, 1.0, 1.0);
        let spec = antiwindup_wrap(&m1(0.5), &m1(1.0), &clm, &sets, 2).unwrap();
        let dir = tempfile::TempDir::new().unwrap();
        spec.save(dir.path()).unwrap();
        let back = BlendSpec::load(dir.path()).unwrap();
        assert_eq!(back.sat_split().map(|(s, t)| (s.clone(), t)), Some((sets.w.clone(), 2)));
        assert_eq!(back.levels(), spec.levels());
    }

    #[test]
    fn open_loop_level_residual_is_the_tail() {
        let a = m1(0.5);
        let clm = deadbeat(0.5, 10);
        let sets = scalar_sets(1.0, 1.0, 1.0);
        let spec = antiwindup_wrap(&a, &m1(1.0), &clm, &sets, 2).unwrap();
        let plant = Plant::lti(a.clone(), m1(1.0)).unwrap();
        let res = level_residual_kernels(&plant, &spec).unwrap();
        assert_eq!(res[0].max_abs(), 0.0);
        for (t, k, blk) in res[1].iter_blocks() {
            let expect = if k == 3 && t >= 2 { 0.25 } else { 0.0 };
            assert_eq!(blk[(0, 0)], expect, "t = {t}, k = {k}");
        }
        let w = Sequence::from_scalars(&[3.0, 0.2, -2.0, 0.0, 0.0, 0.0]);
        let psi = blended_clm(&spec).unwrap();
        let r = clm_residual(&plant, &psi, &w).unwrap();
        let expect = [0.0, 0.0, 0.25 * 2.0, 0.0, -0.25, 0.0];
        for t in 0..6 {
            assert!((r[t][0] - expect[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_internal_dynamics_example() {
        let a = m1(0.5);
        let spec = antiwindup_wrap(
            &a,
            &m1(1.0),
            &deadbeat(0.5, 5),
            &ConstraintSets {
                w: ConvexSet::ball(1, Norm::Two, 1.0).unwrap(),
                x: ConvexSet::symmetric_box(&[1.0]).unwrap(),
                u: ConvexSet::symmetric_box(&[1.0]).unwrap(),
            },
            1,
        )
        .unwrap();
        assert_eq!(spec.levels()[1].r.lags_at(3), 1);
        let w = Sequence::from_scalars(&[2.0, 0.0, 0.0]);
        let wh = saturated_internal_dynamics(&spec, &a, &w).unwrap();
        assert_eq!(wh, Sequence::from_scalars(&[2.0, 0.5, 0.0]));
        let full = simulate_saturated(&a, &m1(1.0), &ConvexSet::symmetric_box(&[1.0]).unwrap(), &spec, &w).unwrap();
        assert!(full.w_hat.max_abs_diff(&wh) < 1e-15);
    }

    #[test]
    fn whole_space_wrap_is_unwrapped() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (a, b, clm) = random_clm(&mut rng, 2, 1, 15, 4);
        let sets = ConstraintSets {
            w: ConvexSet::whole(2),
            x: ConvexSet::whole(2),
            u: ConvexSet::whole(1),
        };
        let spec = antiwindup_wrap(&a, &b, &clm, &sets, 2).unwrap();
        let w = Sequence::from_fn(2, 15, |_| {
            DVector::from_fn(2, |_, _| 5.0 * rng.sample::<f64, _>(StandardNormal))
        });
        let wrapped = simulate_saturated(&a, &b, &sets.u, &spec, &w).unwrap();
        let plant = Plant::lti(a, b).unwrap();
        let plain = simulate_nominal(&plant, SlController::from_clm(&ClmPair::from_affine(clm)).unwrap(), &w).unwrap();
        assert!(wrapped.x.max_abs_diff(&plain.x) < 1e-12);
        assert!(wrapped.u.max_abs_diff(&plain.u) < 1e-12);
    }

    #[test]
    fn inputs_never_saturate_inside_w() {
        let a = m1(0.9);
        let b = m1(1.0);
        let model = LtvModel::time_invariant(a.clone(), b.clone(), 40).unwrap();
        let clm = synthesize_h2_fir(&model, 3).unwrap();
        let w_set = ConvexSet::symmetric_box(&[0.5]).unwrap();
        let x_set = ConvexSet::whole(1);
        let probe = verify_containment(&clm, &w_set, &x_set, &ConvexSet::whole(1)).unwrap();
        assert_eq!(probe.u_upper[0], f64::INFINITY);
        let bound = clm.m.induced_inf_gain() * 0.5;
        let u_set = ConvexSet::symmetric_box(&[bound]).unwrap();
        let sets = ConstraintSets {
            w: w_set,
            x: x_set,
            u: u_set.clone(),
        };
        let spec = antiwindup_wrap(&a, &b, &clm, &sets, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Sequence::from_fn(1, 40, |_| v(&[rng.random_range(-0.5..0.5)]));
        let trace = simulate_saturated(&a, &b, &u_set, &spec, &w).unwrap();
        for u in trace.u.iter() {
            assert_eq!(&u_set.project(u), u);
        }
        assert!(trace.w_hat.max_abs_diff(&w) < 1e-14);
    }

    #[test]
    fn wrap_rejects_bad_inputs() {
        let a = m1(1.0);
        let clm = deadbeat(1.0, 5);
        let err = antiwindup_wrap(&a, &m1(1.0), &clm, &scalar_sets(1.0, 1.0, 0.5), 1).unwrap_err();
        assert!(matches!(err, SlsError::Containment(_)));
        let err = antiwindup_wrap(&m1(0.3), &m1(1.0), &clm, &scalar_sets(1.0, 1.0, 1.0), 1).unwrap_err();
        assert!(matches!(err, SlsError::InvalidArgument(_)));
    }

    #[test]
    fn awp_bound_examples() {
        let ball = ConvexSet::ball(1, Norm::Two, 1.0).unwrap();
        let out = awp_bound(&m1(0.5), 1, &ball, Norm::Two, 1.0, None).unwrap();
        assert_eq!(out.branch(), Some(AwpBranch::Global));
        assert_eq!(out.bound(), Some(2.0));
        match awp_bound(&m1(2.0), 1, &ball, Norm::Two, 0.5, Some(0.5)).unwrap() {
            AwpOutcome::Bound {
                branch,
                admissible,
                bound,
                ..
            } => {
                assert_eq!(branch, AwpBranch::Local);
                assert!((admissible - 2.0 / 3.0).abs() < 1e-15);
                assert_eq!(bound, 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            awp_bound(&m1(2.0), 1, &ball, Norm::Two, 0.7, Some(0.5)).unwrap(),
            AwpOutcome::Infeasible {
                admissible: Some(_),
                ..
            }
        ));
        assert!(matches!(
            awp_bound(&m1(2.0), 1, &ball, Norm::Two, 0.1, None).unwrap(),
            AwpOutcome::Infeasible { admissible: None, .. }
        ));
        assert_eq!(
            awp_bound(&m1(0.0), 1, &ball, Norm::Two, 3.0, None).unwrap().bound(),
            Some(3.0)
        );
        assert!(awp_bound(&m1(2.0), 1, &ball, Norm::Two, 0.1, Some(1.5)).is_err());
    }

    #[test]
    fn contraction_horizon_examples() {
        let half = DMatrix::identity(3, 3) * 0.5;
        assert_eq!(min_contraction_horizon(&half, Norm::Two, 10), Some(1));
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        for n in Norm::ALL {
            assert_eq!(min_contraction_horizon(&nil, n, 10), Some(2));
        }
        assert_eq!(min_contraction_horizon(&m1(2.0), Norm::Inf, 1000), None);
        assert_eq!(min_contraction_horizon(&DMatrix::identity(2, 2), Norm::One, 1000), None);
        let shear = DMatrix::from_row_slice(2, 2, &[0.9, 5.0, 0.0, 0.9]);
        let t = min_contraction_horizon(&shear, Norm::Inf, 500).unwrap();
        assert!(Norm::Inf.induced(&shear.pow(t as u32)) < 1.0);
        assert!(Norm::Inf.induced(&shear.pow(t as u32 - 1)) >= 1.0);
    }

    #[test]
    fn containment_examples() {
        let clm = deadbeat(1.0, 6);
        let unit = ConvexSet::symmetric_box(&[1.0]).unwrap();
        let report = verify_containment(&clm, &unit, &unit, &unit).unwrap();
        assert!(report.is_contained());
        assert_eq!(report.min_margin(), 0.0);
        let small = ConvexSet::symmetric_box(&[0.9]).unwrap();
        assert!(!verify_containment(&clm, &unit, &small, &unit).unwrap().is_contained());
        assert!(!verify_containment(&clm, &unit, &unit, &small).unwrap().is_contained());

        let big = ConvexSet::symmetric_box(&[4.0]).unwrap();
        let full = verify_containment(&clm, &unit, &big, &big).unwrap();
        let half = verify_containment(&clm, &ConvexSet::symmetric_box(&[0.5]).unwrap(), &big, &big).unwrap();
        assert_eq!(4.0 - full.x_upper[0], 2.0 * (4.0 - half.x_upper[0]));

        let zero = AffineClm::linear(
            LinearCausalKernel::identity(1, 4, Some(1)),
            LinearCausalKernel::zeros(1, 1, 4, Some(1)),
        )
        .unwrap();
        let r = verify_containment(&zero, &unit, &unit, &small).unwrap();
        assert_eq!(r.u_upper[0], 0.9);
        assert_eq!(r.x_upper[0], 0.0);

        let img = image_bounds(&clm, &ConvexSet::boxed(vec![-0.5], vec![2.0]).unwrap()).unwrap();
        assert_eq!((img.x_lower[0], img.x_upper[0]), (-0.5, 2.0));
        assert_eq!((img.u_lower[0], img.u_upper[0]), (-2.0, 0.5));

        let ball2 = ConvexSet::ball(1, Norm::Two, 1.0).unwrap();
        assert!(matches!(
            verify_containment(&clm, &ball2, &unit, &unit),
            Err(SlsError::Unsupported(_))
        ));
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("channel,row,lower_margin,upper_margin\n"));
    }

    #[test]
    fn convergence_examples() {
        let a = m1(0.5);
        let b = m1(1.0);
        let clm = deadbeat(0.5, 40);
        let sets = ConstraintSets {
            w: ConvexSet::ball(1, Norm::Two, 1.0).unwrap(),
            x: ConvexSet::symmetric_box(&[1.0]).unwrap(),
            u: ConvexSet::symmetric_box(&[1.0]).unwrap(),
        };
        let spec = antiwindup_wrap(&a, &b, &clm, &sets, 2).unwrap();

        let small = Sequence::from_fn(1, 40, |t| v(&[0.8 * (t as f64).sin()]));
        let trace = simulate_saturated(&a, &b, &sets.u, &spec, &small).unwrap();
        let rep = convergence_check(&spec, &trace.w_hat, &sets.x).unwrap();
        assert_eq!(rep.t_prime, Some(0));

        let mut imp = vec![0.0; 40];
        imp[5] = 6.0;
        let trace = simulate_saturated(&a, &b, &sets.u, &spec, &Sequence::from_scalars(&imp)).unwrap();
        let rep = convergence_check(&spec, &trace.w_hat, &sets.x).unwrap();
        let tp = rep.t_prime.unwrap();
        assert!((5..20).contains(&tp));
        assert!(rep.max_violation_after <= 1e-12);
        for t in tp + 1..40 {
            assert!(sets.x.contains(&trace.x[t], 1e-12), "t = {t}");
        }

        let loud = Sequence::from_fn(1, 40, |_| v(&[3.0]));
        let trace = simulate_saturated(&a, &b, &sets.u, &spec, &loud).unwrap();
        assert_eq!(convergence_check(&spec, &trace.w_hat, &sets.x).unwrap().t_prime, None);
    }
}
