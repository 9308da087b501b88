//! FIR H₂ synthesis for linear time-varying models.
//!
//! Kernels `R_{t,k}`, `M_{t,k}` satisfy `R_{t,1} = I` and
//! `R_{t,k} = Â_{t−1} R_{t−1,k−1} + B̂_{t−1} M_{t−1,k−1}`. Blocks with `k ≥ T`
//! are zero. Blocks sharing the injection time `s = t + 1 − k` form a chain
//! `X_j = R_{s+j,j+1}`, `U_j = M_{s+j,j+1}` with `X_0 = I` and
//! `X_{j+1} = Â_{s+j} X_j + B̂_{s+j} U_j`; the objective separates over chains.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::clm::AffineClm;
use crate::error::{check_dim, Result, SlsError};
use crate::operator::{LinearCausalKernel, Sequence};

/// FIR closed-loop map with reference offsets.
pub type FirClm = AffineClm;

/// Rank tolerance for the terminal constraint.
const RANK_TOL: f64 = 1e-10;
/// Accepted residual of the terminal constraint.
const FEAS_TOL: f64 = 1e-9;

/// Linearized dynamics `x_{t+1} ≈ Â_t x_t + B̂_t u_t` around `(x^d, u^d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtvModel {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    x_ref: Sequence,
    u_ref: Sequence,
}

impl LtvModel {
    /// `a`, `b` hold `Â_t`, `B̂_t` for `t = 0..H−1`; references run over `0..=H`.
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>, x_ref: Sequence, u_ref: Sequence) -> Result<Self> {
        let h = a.len();
        if h == 0 {
            return Err(SlsError::InvalidArgument("LTV model needs at least one step".into()));
        }
        let n = a[0].nrows();
        let m = b.first().map_or(0, |b| b.ncols());
        if b.len() != h {
            return Err(SlsError::HorizonMismatch {
                context: "LtvModel (B̂ count)",
                expected: h,
                actual: b.len(),
            });
        }
        for (at, bt) in a.iter().zip(&b) {
            check_dim("LtvModel (Â rows)", n, at.nrows())?;
            check_dim("LtvModel (Â cols)", n, at.ncols())?;
            check_dim("LtvModel (B̂ rows)", n, bt.nrows())?;
            check_dim("LtvModel (B̂ cols)", m, bt.ncols())?;
        }
        check_dim("LtvModel (x^d)", n, x_ref.dim())?;
        check_dim("LtvModel (u^d)", m, u_ref.dim())?;
        for (ctx, got) in [
            ("LtvModel (x^d horizon)", x_ref.horizon()),
            ("LtvModel (u^d horizon)", u_ref.horizon()),
        ] {
            if got != h {
                return Err(SlsError::HorizonMismatch {
                    context: ctx,
                    expected: h,
                    actual: got,
                });
            }
        }
        Ok(Self { a, b, x_ref, u_ref })
    }

    /// Constant `(A, B)` over `H` steps with zero references.
    pub fn time_invariant(a: DMatrix<f64>, b: DMatrix<f64>, horizon: usize) -> Result<Self> {
        let (n, m) = (a.nrows(), b.ncols());
        Self::new(
            vec![a; horizon],
            vec![b; horizon],
            Sequence::zeros(n, horizon),
            Sequence::zeros(m, horizon),
        )
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    /// `Â_t`, held at `Â_{H−1}` past the horizon.
    pub fn a(&self, t: usize) -> &DMatrix<f64> {
        &self.a[t.min(self.a.len() - 1)]
    }

    /// `B̂_t`, held at `B̂_{H−1}` past the horizon.
    pub fn b(&self, t: usize) -> &DMatrix<f64> {
        &self.b[t.min(self.b.len() - 1)]
    }

    /// Same dynamics on a longer horizon, matrices held past the end.
    fn extended(&self, horizon: usize) -> Self {
        let (n, m) = (self.state_dim(), self.input_dim());
        Self {
            a: (0..horizon).map(|t| self.a(t).clone()).collect(),
            b: (0..horizon).map(|t| self.b(t).clone()).collect(),
            x_ref: Sequence::zeros(n, horizon),
            u_ref: Sequence::zeros(m, horizon),
        }
    }

    pub fn x_ref(&self) -> &Sequence {
        &self.x_ref
    }

    pub fn u_ref(&self) -> &Sequence {
        &self.u_ref
    }
}

/// Optimal chain for injection time `s`: `X_0..X_{L−1}`, `U_0..U_{L−1}`.
struct Chain {
    x: Vec<DMatrix<f64>>,
    u: Vec<DMatrix<f64>>,
}

/// Chains always run the full FIR length; blocks past the horizon are
/// solved against held matrices and then dropped.
fn solve_chain(model: &LtvModel, fir: usize, s: usize) -> Result<Chain> {
    let (n, m) = (model.state_dim(), model.input_dim());
    let nu = (fir - 1) * m;
    // X_j = Φ_j + S_j u, u stacking U_0..U_{T−2}; U_{T−1} = 0
    let mut phi = vec![DMatrix::identity(n, n)];
    let mut sens = vec![DMatrix::zeros(n, nu)];
    for j in 0..fir - 1 {
        let (a, b) = (model.a(s + j), model.b(s + j));
        let mut next = a * &sens[j];
        let mut block = next.columns_mut(j * m, m);
        block += b;
        sens.push(next);
        phi.push(a * &phi[j]);
    }
    let mut q = DMatrix::identity(nu, nu);
    let mut c = DMatrix::zeros(nu, n);
    for j in 1..fir - 1 {
        q += sens[j].transpose() * &sens[j];
        c += sens[j].transpose() * &phi[j];
    }
    let u = constrained_minimizer(&q, &c, &sens[fir - 1], &phi[fir - 1])
        .map_err(|violation| SlsError::Infeasible { h: s, violation })?;
    let mut us: Vec<DMatrix<f64>> = (0..fir - 1).map(|j| u.rows(j * m, m).into_owned()).collect();
    us.push(DMatrix::zeros(m, n));
    let mut xs: Vec<DMatrix<f64>> = (0..fir - 1).map(|j| &phi[j] + &sens[j] * &u).collect();
    xs.push(DMatrix::zeros(n, n));
    Ok(Chain { x: xs, u: us })
}

/// Minimizes `½uᵀQu + tr(cᵀu)` subject to `E u + f = 0` by the null-space method.
/// Returns the constraint residual when the constraint is inconsistent.
fn constrained_minimizer(
    q: &DMatrix<f64>,
    c: &DMatrix<f64>,
    e: &DMatrix<f64>,
    f: &DMatrix<f64>,
) -> std::result::Result<DMatrix<f64>, f64> {
    let nu = q.nrows();
    let rhs_cols = f.ncols();
    if nu == 0 {
        let v = f.norm();
        return if v <= FEAS_TOL {
            Ok(DMatrix::zeros(0, rhs_cols))
        } else {
            Err(v)
        };
    }
    // pad to at least nu rows so the SVD returns a full right basis
    let rows = e.nrows().max(nu);
    let mut padded = DMatrix::zeros(rows, nu);
    padded.rows_mut(0, e.nrows()).copy_from(e);
    let svd = padded.svd(true, true);
    let (uu, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > RANK_TOL * smax.max(1.0))
        .count();
    let mut up = DMatrix::zeros(nu, rhs_cols);
    for i in 0..rank {
        let ui = uu.column(i).rows(0, e.nrows()).into_owned();
        let coef = -(ui.transpose() * f) / svd.singular_values[i];
        up += vt.row(i).transpose() * coef;
    }
    let violation = (e * &up + f).norm();
    if violation > FEAS_TOL * f.norm().max(1.0) {
        return Err(violation);
    }
    if rank == nu {
        return Ok(up);
    }
    let basis = vt.rows(rank, nu - rank).transpose();
    let reduced = basis.transpose() * q * &basis;
    let rhs = -(basis.transpose() * (q * &up + c));
    let z = reduced
        .cholesky()
        .expect("restriction of a positive definite matrix")
        .solve(&rhs);
    Ok(up + basis * z)
}

/// Solves the FIR-constrained H₂ problem with horizon `fir` chain by chain.
pub fn synthesize_h2_fir(model: &LtvModel, fir: usize) -> Result<FirClm> {
    if fir < 2 {
        return Err(SlsError::InvalidArgument(format!(
            "FIR horizon must be at least 2, got {fir}"
        )));
    }
    let h = model.horizon();
    let chains: Vec<Chain> = (0..=h)
        .into_par_iter()
        .map(|s| solve_chain(model, fir, s))
        .collect::<Result<_>>()?;
    assemble(model, fir, chains)
}

fn assemble(model: &LtvModel, fir: usize, chains: Vec<Chain>) -> Result<FirClm> {
    let (n, m, h) = (model.state_dim(), model.input_dim(), model.horizon());
    let mut r = LinearCausalKernel::zeros(n, n, h, Some(fir));
    let mut mk = LinearCausalKernel::zeros(m, n, h, Some(fir));
    for (s, chain) in chains.into_iter().enumerate() {
        for (j, (x, u)) in chain.x.into_iter().zip(chain.u).enumerate().take(h + 1 - s) {
            r.set_block(s + j, j + 1, x)?;
            mk.set_block(s + j, j + 1, u)?;
        }
    }
    AffineClm::new(r, mk, model.x_ref.clone(), model.u_ref.clone())
}

/// Same problem solved jointly over every block: the minimum-norm solution
/// `z = Cᵀ(CCᵀ)⁻¹d` of all equality constraints, one identity column at a time.
/// The horizon is extended by `T − 1` held steps and the result restricted.
pub fn synthesize_h2_fir_stacked(model: &LtvModel, fir: usize) -> Result<FirClm> {
    if fir < 2 {
        return Err(SlsError::InvalidArgument(format!(
            "FIR horizon must be at least 2, got {fir}"
        )));
    }
    let horizon = model.horizon();
    let (r, mk) = stacked_kernels(&model.extended(horizon + fir - 1), fir)?;
    AffineClm::new(
        r.restrict(horizon),
        mk.restrict(horizon),
        model.x_ref.clone(),
        model.u_ref.clone(),
    )
}

fn stacked_kernels(model: &LtvModel, fir: usize) -> Result<(LinearCausalKernel, LinearCausalKernel)> {
    let (n, m, h) = (model.state_dim(), model.input_dim(), model.horizon());
    let lags = |t: usize| fir.min(t + 1);
    // variable offsets: block (t, k) holds n entries of R then m of M
    let mut offset = vec![Vec::new(); h + 1];
    let mut nvar = 0;
    for (t, row) in offset.iter_mut().enumerate() {
        for _ in 0..lags(t) {
            row.push(nvar);
            nvar += n + m;
        }
    }
    let r_var = |t: usize, k: usize, i: usize| offset[t][k - 1] + i;
    let m_var = |t: usize, k: usize, i: usize| offset[t][k - 1] + n + i;
    // constraint rows as sparse (index, coefficient) lists, rhs filled per column
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut identity_row = Vec::new();
    for t in 0..=h {
        for k in 1..=lags(t) {
            for i in 0..n {
                let mut row = vec![(r_var(t, k, i), 1.0)];
                if k == 1 {
                    identity_row.push((rows.len(), i));
                } else {
                    let (a, b) = (model.a(t - 1), model.b(t - 1));
                    for l in 0..n {
                        row.push((r_var(t - 1, k - 1, l), -a[(i, l)]));
                    }
                    for l in 0..m {
                        row.push((m_var(t - 1, k - 1, l), -b[(i, l)]));
                    }
                }
                rows.push(row);
            }
            if k == fir {
                for i in 0..n {
                    rows.push(vec![(r_var(t, k, i), 1.0)]);
                }
                for i in 0..m {
                    rows.push(vec![(m_var(t, k, i), 1.0)]);
                }
            }
        }
    }
    let nc = rows.len();
    let mut gram = DMatrix::zeros(nc, nc);
    let dense: Vec<DVector<f64>> = rows
        .iter()
        .map(|row| {
            let mut v = DVector::zeros(nvar);
            for (j, c) in row {
                v[*j] += c;
            }
            v
        })
        .collect();
    for i in 0..nc {
        for j in 0..=i {
            let g = sparse_dot(&rows[i], &dense[j]);
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let chol = gram.cholesky().ok_or(SlsError::Infeasible {
        h: 0,
        violation: f64::NAN,
    })?;
    let mut r = LinearCausalKernel::zeros(n, n, h, Some(fir));
    let mut mk = LinearCausalKernel::zeros(m, n, h, Some(fir));
    let mut r_blocks = vec![DMatrix::zeros(n, n); nvar / (n + m)];
    let mut m_blocks = vec![DMatrix::zeros(m, n); nvar / (n + m)];
    for col in 0..n {
        let mut d = DVector::zeros(nc);
        for (row, i) in &identity_row {
            if *i == col {
                d[*row] = 1.0;
            }
        }
        let lambda = chol.solve(&d);
        let mut z = DVector::zeros(nvar);
        for (row, l) in rows.iter().zip(lambda.iter()) {
            for (j, c) in row {
                z[*j] += c * l;
            }
        }
        for (blk, (rb, mb)) in r_blocks.iter_mut().zip(m_blocks.iter_mut()).enumerate() {
            let base = blk * (n + m);
            for i in 0..n {
                rb[(i, col)] = z[base + i];
            }
            for i in 0..m {
                mb[(i, col)] = z[base + n + i];
            }
        }
    }
    let mut blk = 0;
    for t in 0..=h {
        for k in 1..=lags(t) {
            r.set_block(t, k, r_blocks[blk].clone())?;
            mk.set_block(t, k, m_blocks[blk].clone())?;
            blk += 1;
        }
    }
    Ok((r, mk))
}

fn sparse_dot(row: &[(usize, f64)], dense: &DVector<f64>) -> f64 {
    row.iter().map(|(j, c)| c * dense[*j]).sum()
}

/// Largest Frobenius deviation from `R_{t,1} = I` and the kernel recursion.
pub fn verify_subspace(clm: &FirClm, model: &LtvModel) -> Result<f64> {
    let n = model.state_dim();
    check_dim("verify_subspace (state)", n, clm.state_dim())?;
    check_dim("verify_subspace (input)", model.input_dim(), clm.input_dim())?;
    if clm.horizon() != model.horizon() {
        return Err(SlsError::HorizonMismatch {
            context: "verify_subspace",
            expected: model.horizon(),
            actual: clm.horizon(),
        });
    }
    let mut worst = 0.0_f64;
    for (t, k, block) in clm.r.iter_blocks() {
        let v = if k == 1 {
            (block - DMatrix::<f64>::identity(n, n)).norm()
        } else {
            let pred =
                model.a(t - 1) * clm.r.block_or_zero(t - 1, k - 1) + model.b(t - 1) * clm.m.block_or_zero(t - 1, k - 1);
            (block - pred).norm()
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// Largest Frobenius norm of the stored blocks `R_{t,T}` and `M_{t,T}`.
pub fn terminal_violation(clm: &FirClm) -> f64 {
    let Some(fir) = clm.fir() else { return f64::INFINITY };
    clm.r
        .iter_blocks()
        .chain(clm.m.iter_blocks())
        .filter(|(_, k, _)| *k == fir)
        .map(|(_, _, b)| b.norm())
        .fold(0.0, f64::max)
}

/// `Σ ‖R_{t,k}‖²_F + ‖M_{t,k}‖²_F` over all stored blocks.
pub fn h2_cost(clm: &FirClm) -> f64 {
    clm.r.frobenius_sq() + clm.m.frobenius_sq()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, b: f64, h: usize) -> LtvModel {
        LtvModel::time_invariant(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b), h).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize, m: usize, h: usize) -> LtvModel {
        let a = (0..h)
            .map(|_| DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let b = (0..h)
            .map(|_| DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let xr = Sequence::from_fn(n, h, |_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)));
        let ur = Sequence::from_fn(m, h, |_| DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)));
        LtvModel::new(a, b, xr, ur).unwrap()
    }

    #[test]
    fn zero_drift_gives_identity_only() {
        for fir in [2, 3, 5] {
            let clm = synthesize_h2_fir(&scalar(0.0, 1.0, 8), fir).unwrap();
            assert!(clm.m.max_abs() == 0.0);
            for (_, k, b) in clm.r.iter_blocks() {
                assert_eq!(b[(0, 0)], if k == 1 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn forced_deadbeat() {
        let clm = synthesize_h2_fir(&scalar(1.0, 1.0, 3), 2).unwrap();
        for t in 0..=3 {
            assert_eq!(clm.m.block(t, 1).unwrap()[(0, 0)], -1.0);
            if t >= 1 {
                assert_eq!(clm.r.block(t, 2).unwrap()[(0, 0)], 0.0);
            }
        }
        assert_eq!(h2_cost(&clm), 8.0);
        assert_eq!(verify_subspace(&clm, &scalar(1.0, 1.0, 3)).unwrap(), 0.0);
    }

    #[test]
    fn cost_examples() {
        let r = LinearCausalKernel::identity(1, 3, Some(1));
        let m = LinearCausalKernel::zeros(1, 1, 3, Some(1));
        assert_eq!(h2_cost(&AffineClm::linear(r, m).unwrap()), 4.0);
        let r = LinearCausalKernel::zeros(2, 2, 3, Some(2));
        let m = LinearCausalKernel::zeros(1, 2, 3, Some(2));
        let clm = AffineClm {
            r_offset: Sequence::zeros(2, 3),
            m_offset: Sequence::zeros(1, 3),
            r,
            m,
        };
        assert_eq!(h2_cost(&clm), 0.0);
    }

    #[test]
    fn perturbation_shows_in_violation() {
        let model = scalar(1.0, 1.0, 4);
        let mut clm = synthesize_h2_fir(&model, 2).unwrap();
        clm.r.set_block(2, 2, DMatrix::from_element(1, 1, 0.1)).unwrap();
        assert!((verify_subspace(&clm, &model).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn uncontrollable_chain_is_infeasible() {
        match synthesize_h2_fir(&scalar(0.8, 0.0, 6), 3) {
            Err(SlsError::Infeasible { h, violation }) => {
                assert_eq!(h, 0);
                assert!(violation > 0.5);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
        assert!(synthesize_h2_fir(&scalar(0.0, 0.0, 6), 3).is_ok());
        assert!(synthesize_h2_fir(&scalar(1.0, 1.0, 6), 1).is_err());
    }

    #[test]
    fn random_models_satisfy_subspace_and_match_stacked() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..6 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(1..=n);
            let h = rng.random_range(2..=15);
            let fir = rng.random_range(n + 1..=7);
            let model = random_model(&mut rng, n, m, h);
            let clm = synthesize_h2_fir(&model, fir).unwrap();
            assert!(verify_subspace(&clm, &model).unwrap() <= 1e-8);
            assert!(terminal_violation(&clm) <= 1e-9);
            let stacked = synthesize_h2_fir_stacked(&model, fir).unwrap();
            assert!(clm.r.sub(&stacked.r).unwrap().max_abs() <= 1e-9);
            assert!(clm.m.sub(&stacked.m).unwrap().max_abs() <= 1e-9);
        }
    }

    #[test]
    fn first_order_optimality() {
        // a feasible direction: change U_0 on one chain within null(E), propagate
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(&mut rng, 2, 2, 10);
        let fir = 4;
        let clm = synthesize_h2_fir(&model, fir).unwrap();
        let base = h2_cost(&clm);
        for trial in 0..20 {
            let s = trial % 7;
            let b0 = model.b(s);
            let (a1, b1) = (model.a(s + 1), model.b(s + 1));
            let (a2, b2) = (model.a(s + 2), model.b(s + 2));
            // δX_3 = A2 A1 B0 δU0 + A2 B1 δU1 + B2 δU2 = 0: pick δU0, δU1, solve δU2
            let du0 = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let du1 = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let lhs = a2 * a1 * b0 * &du0 + a2 * b1 * &du1;
            let du2 = -b2.clone().lu().solve(&lhs).unwrap();
            for eps in [1e-3, -1e-3] {
                let mut p = clm.clone();
                let mut dx = DMatrix::zeros(2, 2);
                for (j, du) in [&du0, &du1, &du2].into_iter().enumerate() {
                    let (a, b) = (model.a(s + j), model.b(s + j));
                    let mu = p.m.block(s + j, j + 1).unwrap() + du * eps;
                    p.m.set_block(s + j, j + 1, mu).unwrap();
                    dx = a * &dx + b * du * eps;
                    if j + 1 < fir - 1 {
                        let rx = p.r.block(s + j + 1, j + 2).unwrap() + &dx;
                        p.r.set_block(s + j + 1, j + 2, rx).unwrap();
                    }
                }
                assert!(verify_subspace(&p, &model).unwrap() <= 1e-8);
                assert!(h2_cost(&p) >= base - 1e-7);
            }
        }
    }
}
