//! Linear plant, horizon-stacked prediction matrices and the reordering lift.
//!
//! The plant is `x_{t+1} = A x_t + Bu u_t + Bw w_t`. Over a horizon of `p`
//! steps the stacked trajectory `X = (x_1, .., x_p)` is an affine function of
//! the initial state, the stacked input `U = (u_0, .., u_{p-1})` and the
//! stacked disturbance `W = (w_0, .., w_{p-1})`:
//!
//! ```text
//! X = Gx x0 + Gu U + Gw W
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Discrete-time LTI plant together with the prediction horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    bu: DMatrix<f64>,
    bw: DMatrix<f64>,
    horizon: usize,
}

/// State, input and disturbance sizes plus the horizon length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub nu: usize,
    pub nw: usize,
    pub horizon: usize,
}

impl Dims {
    /// Length of the stacked state trajectory.
    pub fn state_len(&self) -> usize {
        self.horizon * self.nx
    }

    pub fn input_len(&self) -> usize {
        self.horizon * self.nu
    }

    pub fn disturbance_len(&self) -> usize {
        self.horizon * self.nw
    }
}

impl LinearSystem {
    pub fn new(
        a: DMatrix<f64>,
        bu: DMatrix<f64>,
        bw: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        let nx = a.nrows();
        if nx == 0 || a.ncols() != nx {
            return dim_err(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols()));
        }
        if bu.nrows() != nx || bu.ncols() == 0 {
            return dim_err(format!("Bu must be {nx}xn_u with n_u >= 1, got {}x{}", bu.nrows(), bu.ncols()));
        }
        if bw.nrows() != nx || bw.ncols() == 0 {
            return dim_err(format!("Bw must be {nx}xn_w with n_w >= 1, got {}x{}", bw.nrows(), bw.ncols()));
        }
        if horizon == 0 {
            return dim_err("horizon must be at least 1");
        }
        Ok(Self { a, bu, bw, horizon })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn bu(&self) -> &DMatrix<f64> {
        &self.bu
    }

    pub fn bw(&self) -> &DMatrix<f64> {
        &self.bw
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dims(&self) -> Dims {
        Dims {
            nx: self.a.nrows(),
            nu: self.bu.ncols(),
            nw: self.bw.ncols(),
            horizon: self.horizon,
        }
    }

    /// One step of the plant recursion.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.bu * u + &self.bw * w
    }

    pub fn stack(&self) -> StackedSystem {
        stack_system(self)
    }
}

/// Horizon-condensed prediction matrices.
///
/// Block row `i` (0-based) predicts `x_{i+1}`. Block `(i, j)` of `Gu` is
/// `A^{i-j} Bu` for `j <= i` and zero above the block diagonal; `Gw` has the
/// same structure with `Bw`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedSystem {
    pub gx: DMatrix<f64>,
    pub gu: DMatrix<f64>,
    pub gw: DMatrix<f64>,
    pub dims: Dims,
}

/// Builds `Gx`, `Gu`, `Gw`. Powers of `A` come from repeated multiplication.
pub fn stack_system(sys: &LinearSystem) -> StackedSystem {
    let dims = sys.dims();
    let Dims { nx, nu, nw, horizon: p } = dims;

    // powers[k] = A^k, k = 0..=p
    let mut powers = Vec::with_capacity(p + 1);
    powers.push(DMatrix::<f64>::identity(nx, nx));
    for k in 1..=p {
        let next = &sys.a * &powers[k - 1];
        powers.push(next);
    }

    let mut gx = DMatrix::zeros(p * nx, nx);
    let mut gu = DMatrix::zeros(p * nx, p * nu);
    let mut gw = DMatrix::zeros(p * nx, p * nw);

    let au: Vec<DMatrix<f64>> = powers.iter().take(p).map(|ak| ak * &sys.bu).collect();
    let aw: Vec<DMatrix<f64>> = powers.iter().take(p).map(|ak| ak * &sys.bw).collect();

    for i in 0..p {
        gx.view_mut((i * nx, 0), (nx, nx)).copy_from(&powers[i + 1]);
        for j in 0..=i {
            gu.view_mut((i * nx, j * nu), (nx, nu)).copy_from(&au[i - j]);
            gw.view_mut((i * nx, j * nw), (nx, nw)).copy_from(&aw[i - j]);
        }
    }

    StackedSystem { gx, gu, gw, dims }
}

impl StackedSystem {
    /// Stacked state trajectory `Gx x0 + Gu U + Gw W`.
    pub fn propagate(
        &self,
        x0: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let d = self.dims;
        if x0.len() != d.nx {
            return dim_err(format!("x0 has length {}, expected {}", x0.len(), d.nx));
        }
        if u.len() != d.input_len() {
            return dim_err(format!("U has length {}, expected {}", u.len(), d.input_len()));
        }
        if w.len() != d.disturbance_len() {
            return dim_err(format!("W has length {}, expected {}", w.len(), d.disturbance_len()));
        }
        Ok(&self.gx * x0 + &self.gu * u + &self.gw * w)
    }

    /// Free response `Gx x0`.
    pub fn free_response(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        if x0.len() != self.dims.nx {
            return dim_err(format!("x0 has length {}, expected {}", x0.len(), self.dims.nx));
        }
        Ok(&self.gx * x0)
    }
}

/// Free function form of [`StackedSystem::propagate`].
pub fn propagate(
    stacked: &StackedSystem,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    stacked.propagate(x0, u, w)
}

/// Reorders a product `A B` (`A` is `n x z`, `B` is `z x m`) into `B̄ Ā`.
///
/// `B̄ = [b_1 .. b_z] ⊗ I_n` is `n x (z m n)` and carries only entries of `B`;
/// `Ā` stacks the blocks `I_m ⊗ a_l` over the columns `a_l` of `A` and is
/// `(z m n) x m`. Column `(l m + j) n + r` of `B̄` holds `B[l, j]` on row `r`;
/// row `(l m + j) n + r` of `Ā` holds `A[r, l]` in column `j`.
///
/// ```
/// use nalgebra::DMatrix;
/// use scenario_truncation::system::lift_reorder;
///
/// let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
/// let b = DMatrix::from_row_slice(3, 1, &[1.0, 0.5, -1.0]);
/// let (bbar, abar) = lift_reorder(&a, &b).unwrap();
/// assert!((bbar * abar - a * b).amax() < 1e-12);
/// ```
pub fn lift_reorder(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_inner(a, b)?;
    Ok((lift_right(b, a.nrows()), lift_left(a, b.ncols())))
}

/// `Ā` of [`lift_reorder`]: depends only on the left factor and the column
/// count `m` of the right factor.
pub fn lift_left(a: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let (n, z) = a.shape();
    let mut out = DMatrix::zeros(z * m * n, m);
    for l in 0..z {
        for j in 0..m {
            let base = (l * m + j) * n;
            for r in 0..n {
                out[(base + r, j)] = a[(r, l)];
            }
        }
    }
    out
}

/// `B̄` of [`lift_reorder`]: depends only on the right factor and the row
/// count `n` of the left factor.
pub fn lift_right(b: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let (z, m) = b.shape();
    let mut out = DMatrix::zeros(n, z * m * n);
    for l in 0..z {
        for j in 0..m {
            let base = (l * m + j) * n;
            for r in 0..n {
                out[(r, base + r)] = b[(l, j)];
            }
        }
    }
    out
}

/// Coordinate-format sparse matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.entries {
            out[(r, c)] += v;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

/// Sparse form of [`lift_reorder`]; exact zeros of either factor are skipped.
///
/// The dense lift has `z m n` inner columns, which grows quickly for stacked
/// horizons; the nonzero count of each factor is at most `nnz(A) m` and
/// `nnz(B) n`.
pub fn lift_reorder_sparse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(Triplets, Triplets)> {
    check_inner(a, b)?;
    let (n, z) = a.shape();
    let m = b.ncols();
    let inner = z * m * n;
    let mut bbar = Triplets { nrows: n, ncols: inner, entries: Vec::new() };
    let mut abar = Triplets { nrows: inner, ncols: m, entries: Vec::new() };
    for l in 0..z {
        for j in 0..m {
            let base = (l * m + j) * n;
            let blj = b[(l, j)];
            for r in 0..n {
                if blj != 0.0 {
                    bbar.entries.push((r, base + r, blj));
                }
                let arl = a[(r, l)];
                if arl != 0.0 {
                    abar.entries.push((base + r, j, arl));
                }
            }
        }
    }
    Ok((bbar, abar))
}

fn check_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.ncols() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "inner dimensions differ: left is {}x{}, right is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Kronecker product `I_k ⊗ m`.
pub fn block_diag_repeat(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(k * r, k * c);
    for i in 0..k {
        out.view_mut((i * r, i * c), (r, c)).copy_from(m);
    }
    out
}
