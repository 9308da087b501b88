use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result, SlsError};

/// Block-lower-triangular representation of a linear causal operator,
/// `y_t = Σ_{k=1}^{min(t+1, T)} K_{t,k} x_{t+1-k}`.
///
/// Blocks with lag index `k > T` (the FIR horizon) are absent and read as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCausalKernel {
    in_dim: usize,
    out_dim: usize,
    fir: Option<usize>,
    // blocks[t][k - 1]
    blocks: Vec<Vec<DMatrix<f64>>>,
}

impl LinearCausalKernel {
    pub fn zeros(out_dim: usize, in_dim: usize, horizon: usize, fir: Option<usize>) -> Self {
        Self::from_fn(out_dim, in_dim, horizon, fir, |_, _| DMatrix::zeros(out_dim, in_dim))
    }

    pub fn from_fn(
        out_dim: usize,
        in_dim: usize,
        horizon: usize,
        fir: Option<usize>,
        mut f: impl FnMut(usize, usize) -> DMatrix<f64>,
    ) -> Self {
        if let Some(t) = fir {
            assert!(t >= 1, "FIR horizon must be at least 1");
        }
        let blocks = (0..=horizon)
            .map(|t| {
                (1..=Self::lags(t, fir))
                    .map(|k| {
                        let b = f(t, k);
                        assert_eq!(b.shape(), (out_dim, in_dim), "kernel block shape");
                        b
                    })
                    .collect()
            })
            .collect();
        Self {
            in_dim,
            out_dim,
            fir,
            blocks,
        }
    }

    /// Identity operator: `K_{t,1} = I`, every other block zero.
    pub fn identity(dim: usize, horizon: usize, fir: Option<usize>) -> Self {
        Self::from_fn(dim, dim, horizon, fir, |_, k| {
            if k == 1 {
                DMatrix::identity(dim, dim)
            } else {
                DMatrix::zeros(dim, dim)
            }
        })
    }

    /// Time-invariant kernel from its impulse response `taps[k-1] = K_{·,k}`.
    pub fn time_invariant(taps: &[DMatrix<f64>], horizon: usize) -> Result<Self> {
        let first = taps
            .first()
            .ok_or_else(|| SlsError::InvalidArgument("empty tap list".into()))?;
        let (out_dim, in_dim) = first.shape();
        for tap in taps {
            if tap.shape() != (out_dim, in_dim) {
                return Err(SlsError::InvalidArgument("ragged tap shapes".into()));
            }
        }
        Ok(Self::from_fn(out_dim, in_dim, horizon, Some(taps.len()), |_, k| {
            taps[k - 1].clone()
        }))
    }

    fn lags(t: usize, fir: Option<usize>) -> usize {
        match fir {
            Some(cut) => (t + 1).min(cut),
            None => t + 1,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn horizon(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn fir(&self) -> Option<usize> {
        self.fir
    }

    /// Number of stored lags at time `t`.
    pub fn lags_at(&self, t: usize) -> usize {
        self.blocks.get(t).map_or(0, Vec::len)
    }

    pub fn block(&self, t: usize, k: usize) -> Option<&DMatrix<f64>> {
        if k == 0 {
            return None;
        }
        self.blocks.get(t).and_then(|row| row.get(k - 1))
    }

    pub fn block_or_zero(&self, t: usize, k: usize) -> DMatrix<f64> {
        self.block(t, k)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(self.out_dim, self.in_dim))
    }

    pub fn set_block(&mut self, t: usize, k: usize, value: DMatrix<f64>) -> Result<()> {
        if value.shape() != (self.out_dim, self.in_dim) {
            return Err(SlsError::InvalidArgument(format!(
                "block shape {:?} does not match kernel {}x{}",
                value.shape(),
                self.out_dim,
                self.in_dim
            )));
        }
        let slot = self
            .blocks
            .get_mut(t)
            .and_then(|row| if k == 0 { None } else { row.get_mut(k - 1) })
            .ok_or_else(|| SlsError::InvalidArgument(format!("block ({t}, {k}) outside the kernel support")))?;
        *slot = value;
        Ok(())
    }

    /// Iterates `(t, k, block)` over every stored block.
    pub fn iter_blocks(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(t, row)| row.iter().enumerate().map(move |(i, b)| (t, i + 1, b)))
    }

    /// `K_{t,1} = I` at every time step.
    pub fn is_identity_leading(&self, tol: f64) -> bool {
        self.in_dim == self.out_dim
            && self
                .blocks
                .iter()
                .all(|row| (&row[0] - DMatrix::identity(self.in_dim, self.in_dim)).amax() <= tol)
    }

    pub fn is_strictly_causal(&self) -> bool {
        self.blocks.iter().all(|row| row[0].iter().all(|v| *v == 0.0))
    }

    /// Component `y_t` for the history `x_0..=x_t`. Only the last `T` inputs are read.
    pub fn apply_at(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let t = history.len() - 1;
        let row = self
            .blocks
            .get(t)
            .unwrap_or_else(|| panic!("kernel evaluated at t = {t} beyond its horizon {}", self.horizon()));
        let mut out = DVector::zeros(self.out_dim);
        for (i, block) in row.iter().enumerate() {
            out.gemv(1.0, block, &history[t - i], 1.0);
        }
        out
    }

    pub fn apply(&self, input: &[DVector<f64>]) -> Vec<DVector<f64>> {
        (1..=input.len()).map(|l| self.apply_at(&input[..l])).collect()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.blocks {
            for b in row {
                *b *= c;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.combine(other, 1.0)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.combine(other, -1.0)
    }

    fn combine(&self, other: &Self, sign: f64) -> Result<Self> {
        check_dim("kernel add (input)", self.in_dim, other.in_dim)?;
        check_dim("kernel add (output)", self.out_dim, other.out_dim)?;
        let horizon = self.horizon().min(other.horizon());
        let fir = match (self.fir, other.fir) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
        Ok(Self::from_fn(self.out_dim, self.in_dim, horizon, fir, |t, k| {
            self.block_or_zero(t, k) + other.block_or_zero(t, k) * sign
        }))
    }

    /// `self ∘ inner`: `C_{t,k} = Σ_{j=1}^{k} K_{t,j} L_{t+1-j, k+1-j}`.
    pub fn compose(&self, inner: &Self) -> Result<Self> {
        check_dim("kernel compose", self.in_dim, inner.out_dim)?;
        let horizon = self.horizon().min(inner.horizon());
        let fir = match (self.fir, inner.fir) {
            (Some(a), Some(b)) => Some(a + b - 1),
            _ => None,
        };
        Ok(Self::from_fn(self.out_dim, inner.in_dim, horizon, fir, |t, k| {
            let mut acc = DMatrix::zeros(self.out_dim, inner.in_dim);
            for j in 1..=k {
                if let (Some(a), Some(b)) = (self.block(t, j), inner.block(t + 1 - j, k + 1 - j)) {
                    acc.gemm(1.0, a, b, 1.0);
                }
            }
            acc
        }))
    }

    /// Same blocks on a shorter or equal horizon.
    pub fn restrict(&self, horizon: usize) -> Self {
        let mut out = self.clone();
        out.blocks.truncate(horizon + 1);
        out
    }

    /// Exact induced ℓ∞→ℓ∞ gain (∞-vector norm): the largest absolute row sum
    /// over all stored blocks of a time step.
    pub fn induced_inf_gain(&self) -> f64 {
        let mut worst = 0.0_f64;
        for row in &self.blocks {
            for i in 0..self.out_dim {
                let s: f64 = row.iter().map(|b| b.row(i).iter().map(|v| v.abs()).sum::<f64>()).sum();
                worst = worst.max(s);
            }
        }
        worst
    }

    /// Largest absolute entry over all blocks.
    pub fn max_abs(&self) -> f64 {
        self.iter_blocks().map(|(_, _, b)| b.amax()).fold(0.0, f64::max)
    }

    /// Sum of squared Frobenius norms of all stored blocks.
    pub fn frobenius_sq(&self) -> f64 {
        self.iter_blocks().map(|(_, _, b)| b.norm_squared()).sum()
    }
}
