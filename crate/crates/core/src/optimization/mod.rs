//! Convex programs over the disturbance-feedback policy `U = K W + V`.
//!
//! Three programs share one assembly path:
//!
//! * the plain scenario program (every design scenario, no buffers),
//! * the open-loop program (nominal inputs only, state buffers from `F^x Gw`),
//! * the truncated closed-loop program (selected scenarios, buffers that
//!   scale with a per-step bound `ζ_t` on the gain entries acting before `t`).
//!
//! `K` is strictly block lower triangular, so only the blocks `K_{i,j}` with
//! `j < i` are decision variables. They are laid out block row by block row,
//! each block in row-major order, which makes `κ_t` a prefix of the gain
//! variables.

mod assemble;
mod backend;

pub use assemble::{
    assemble_openloop_problem, assemble_scenario_problem, assemble_truncated_problem, AssemblyOptions, Cone,
    ProblemKind, ProblemSpec, SparseRows, VarLayout,
};
pub use backend::{BackendSolution, ClarabelBackend, QpBackend, SolveStatus};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::serde_matrix;
use crate::system::{block_diag_repeat, Dims, StackedSystem};

/// Stage constraints `f^x x <= 1` and `f^u u <= 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    #[serde(with = "serde_matrix::rows")]
    pub fx: DMatrix<f64>,
    #[serde(with = "serde_matrix::rows")]
    pub fu: DMatrix<f64>,
}

impl ConstraintSpec {
    pub fn new(fx: DMatrix<f64>, fu: DMatrix<f64>) -> Result<Self> {
        let spec = Self { fx, fu };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx.nrows() == 0 || self.fu.nrows() == 0 {
            return Err(Error::InvalidConstraints("each stage constraint matrix needs at least one row".into()));
        }
        if self.fx.iter().chain(self.fu.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConstraints("constraint matrices must be finite".into()));
        }
        Ok(())
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        if self.fx.ncols() != dims.nx {
            return dim_err(format!("f^x has {} columns, expected n_x = {}", self.fx.ncols(), dims.nx));
        }
        if self.fu.ncols() != dims.nu {
            return dim_err(format!("f^u has {} columns, expected n_u = {}", self.fu.ncols(), dims.nu));
        }
        Ok(())
    }

    pub fn ncx(&self) -> usize {
        self.fx.nrows()
    }

    pub fn ncu(&self) -> usize {
        self.fu.nrows()
    }

    /// `F^x = I_p ⊗ f^x`.
    pub fn stacked_fx(&self, horizon: usize) -> DMatrix<f64> {
        block_diag_repeat(&self.fx, horizon)
    }

    /// `F^u = I_p ⊗ f^u`.
    pub fn stacked_fu(&self, horizon: usize) -> DMatrix<f64> {
        block_diag_repeat(&self.fu, horizon)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectationMode {
    /// Cost of the disturbance-free trajectory.
    #[default]
    Nominal,
    /// Average cost over the scenarios that enter the program.
    ScenarioMean,
}

/// Quadratic tracking cost `Σ_t (x_t - r_t)ᵀ Q (x_t - r_t) + u_tᵀ R u_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    #[serde(with = "serde_matrix::rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "serde_matrix::rows")]
    pub r: DMatrix<f64>,
    /// Stacked reference `(r_1, .., r_p)`; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<f64>>,
    #[serde(default)]
    pub expectation: ExpectationMode,
}

impl CostSpec {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        Self { q, r, reference: None, expectation: ExpectationMode::Nominal }
    }

    pub fn with_reference(mut self, reference: Vec<f64>) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn with_expectation(mut self, mode: ExpectationMode) -> Self {
        self.expectation = mode;
        self
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        check_psd("Q", &self.q, dims.nx)?;
        check_psd("R", &self.r, dims.nu)?;
        if let Some(r) = &self.reference {
            if r.len() != dims.state_len() {
                return dim_err(format!("reference has length {}, expected {}", r.len(), dims.state_len()));
            }
        }
        Ok(())
    }

    pub(crate) fn reference_vec(&self, len: usize) -> DVector<f64> {
        match &self.reference {
            Some(r) => DVector::from_column_slice(r),
            None => DVector::zeros(len),
        }
    }
}

fn check_psd(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::InvalidCost(format!("{name} must be {n}x{n}, got {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidCost(format!("{name} has non-finite entries")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidCost(format!("{name} is not symmetric")));
    }
    if m.clone().symmetric_eigen().eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::InvalidCost(format!("{name} is not positive semidefinite")));
    }
    Ok(())
}

/// Norm bounding `κ_t` by `ζ_t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormChoice {
    /// Absolute-value epigraph rows; dual to the ∞-norm error measure.
    #[default]
    One,
    /// Second-order cone rows.
    Two,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

/// Solved disturbance-feedback policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerPolicy {
    #[serde(with = "serde_matrix::rows")]
    pub k: DMatrix<f64>,
    #[serde(with = "serde_matrix::vector")]
    pub v: DVector<f64>,
    #[serde(with = "serde_matrix::vector")]
    pub zeta: DVector<f64>,
    pub objective_value: f64,
    pub solver_status: PolicyStatus,
}

impl ControllerPolicy {
    /// Open-loop policy `U = V`.
    pub fn open_loop(v: DVector<f64>, dims: Dims) -> Result<Self> {
        if v.len() != dims.input_len() {
            return dim_err(format!("V has length {}, expected {}", v.len(), dims.input_len()));
        }
        Ok(Self {
            k: DMatrix::zeros(dims.input_len(), dims.disturbance_len()),
            v,
            zeta: DVector::zeros(dims.horizon),
            objective_value: f64::NAN,
            solver_status: PolicyStatus::Optimal,
        })
    }

    pub fn is_optimal(&self) -> bool {
        self.solver_status == PolicyStatus::Optimal
    }

    pub fn require_optimal(&self) -> Result<&Self> {
        match self.solver_status {
            PolicyStatus::Optimal => Ok(self),
            s => Err(Error::Backend(format!("solver finished with status {s:?}"))),
        }
    }

    /// Block `(i, j)` of `K`.
    pub fn gain_block(&self, dims: Dims, i: usize, j: usize) -> DMatrix<f64> {
        self.k.view((i * dims.nu, j * dims.nw), (dims.nu, dims.nw)).into_owned()
    }
}

/// Solves an assembled program and unpacks the policy.
pub fn solve(problem: &ProblemSpec, backend: &dyn QpBackend) -> Result<ControllerPolicy> {
    let sol = backend.solve(problem)?;
    Ok(problem.policy_from_solution(&sol))
}

/// Gain entries acting before step `t` (1-based): the entries of `K_{1,0}`,
/// `K_{2,0}`, `K_{2,1}`, .., `K_{t-1,t-2}`, block row by block row, each block
/// row-major. `κ_1` is empty.
pub fn kappa(k: &DMatrix<f64>, dims: Dims, t: usize) -> Result<DVector<f64>> {
    let p = dims.horizon;
    if t == 0 || t > p {
        return Err(Error::TimeOutOfRange { t, horizon: p });
    }
    if k.shape() != (dims.input_len(), dims.disturbance_len()) {
        return dim_err(format!("K is {}x{}, expected {}x{}", k.nrows(), k.ncols(), dims.input_len(), dims.disturbance_len()));
    }
    let mut out = Vec::with_capacity(kappa_len(dims, t));
    for i in 1..t {
        for j in 0..i {
            for r in 0..dims.nu {
                for c in 0..dims.nw {
                    out.push(k[(i * dims.nu + r, j * dims.nw + c)]);
                }
            }
        }
    }
    Ok(DVector::from_vec(out))
}

/// Length of `κ_t`.
pub fn kappa_len(dims: Dims, t: usize) -> usize {
    t * t.saturating_sub(1) / 2 * dims.nu * dims.nw
}

/// Inputs and states under disturbance `w`: `U = K W + V`,
/// `X = Gx x0 + Gu U + Gw W`.
pub fn apply_policy(
    policy: &ControllerPolicy,
    stacked: &StackedSystem,
    x0: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = stacked.dims;
    if policy.k.shape() != (d.input_len(), d.disturbance_len()) || policy.v.len() != d.input_len() {
        return dim_err("policy does not match the stacked system");
    }
    if w.len() != d.disturbance_len() {
        return dim_err(format!("W has length {}, expected {}", w.len(), d.disturbance_len()));
    }
    let u = &policy.k * w + &policy.v;
    let x = stacked.propagate(x0, &u, w)?;
    Ok((u, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::LinearSystem;

    fn dims(p: usize) -> Dims {
        Dims { nx: 2, nu: 1, nw: 2, horizon: p }
    }

    fn numbered_gain(d: Dims) -> DMatrix<f64> {
        DMatrix::from_fn(d.input_len(), d.disturbance_len(), |r, c| {
            if r / d.nu > c / d.nw {
                (r * 100 + c) as f64
            } else {
                0.0
            }
        })
    }

    #[test]
    fn kappa_prefix_structure() {
        let d = dims(4);
        let k = numbered_gain(d);
        assert_eq!(kappa(&k, d, 1).unwrap().len(), 0);
        let k2 = kappa(&k, d, 2).unwrap();
        assert_eq!(k2.as_slice(), &[100.0, 101.0]);
        let k3 = kappa(&k, d, 3).unwrap();
        assert_eq!(k3.as_slice(), &[100.0, 101.0, 200.0, 201.0, 202.0, 203.0]);
        assert_eq!(kappa_len(d, 4), 6 * 2);
        assert!(matches!(kappa(&k, d, 0), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(kappa(&k, d, 5), Err(Error::TimeOutOfRange { .. })));
    }

    #[test]
    fn policy_without_disturbance_is_nominal() {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            3,
        )
        .unwrap();
        let st = sys.stack();
        let d = st.dims;
        let policy = ControllerPolicy {
            k: numbered_gain(d) * 0.001,
            v: DVector::from_vec(vec![0.1, -0.2, 0.3]),
            zeta: DVector::zeros(3),
            objective_value: 0.0,
            solver_status: PolicyStatus::Optimal,
        };
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let (u, _) = apply_policy(&policy, &st, &x0, &DVector::zeros(6)).unwrap();
        assert_eq!(u, policy.v);

        // the last disturbance block reaches no input
        let mut w = DVector::zeros(6);
        let (u0, _) = apply_policy(&policy, &st, &x0, &w).unwrap();
        w[4] = 1.0;
        w[5] = -2.0;
        let (u1, _) = apply_policy(&policy, &st, &x0, &w).unwrap();
        assert_eq!(u0, u1);

        assert!(apply_policy(&policy, &st, &x0, &DVector::zeros(5)).is_err());
    }

    #[test]
    fn cost_validation() {
        let d = dims(2);
        let good = CostSpec::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1);
        assert!(good.validate(d).is_ok());
        let asym = CostSpec::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), DMatrix::identity(1, 1));
        assert!(asym.validate(d).is_err());
        let indef = CostSpec::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), DMatrix::identity(1, 1));
        assert!(indef.validate(d).is_err());
        let bad_ref = good.clone().with_reference(vec![0.0; 3]);
        assert!(bad_ref.validate(d).is_err());
    }

    #[test]
    fn constraint_validation() {
        assert!(ConstraintSpec::new(DMatrix::zeros(0, 2), DMatrix::identity(1, 1)).is_err());
        assert!(ConstraintSpec::new(DMatrix::from_element(1, 2, f64::NAN), DMatrix::identity(1, 1)).is_err());
        let c = ConstraintSpec::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1)).unwrap();
        assert!(c.check_dims(dims(2)).is_ok());
        assert!(c.check_dims(Dims { nx: 3, ..dims(2) }).is_err());
    }
}
