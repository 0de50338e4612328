use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus, SupportedConeT,
    ZeroConeT,
};
use serde::{Deserialize, Serialize};

use super::assemble::{Cone, ProblemSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Solved,
    Infeasible,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendSolution {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    /// Backend objective, without the constant term.
    pub objective: f64,
    pub iterations: u32,
}

/// Anything that can solve a conic [`ProblemSpec`].
pub trait QpBackend: Sync {
    fn solve(&self, problem: &ProblemSpec) -> Result<BackendSolution>;
}

/// Interior-point backend built on Clarabel.
#[derive(Clone, Debug)]
pub struct ClarabelBackend {
    pub tolerance: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iter: 200, verbose: false }
    }
}

impl QpBackend for ClarabelBackend {
    fn solve(&self, problem: &ProblemSpec) -> Result<BackendSolution> {
        let n = problem.n_vars();
        let m = problem.n_rows();
        let (pi, (pj, pv)): (Vec<_>, (Vec<_>, Vec<_>)) = problem.p_upper.iter().map(|&(i, j, v)| (i, (j, v))).unzip();
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

        let mut ai = Vec::with_capacity(problem.a.nnz());
        let mut aj = Vec::with_capacity(problem.a.nnz());
        let mut av = Vec::with_capacity(problem.a.nnz());
        for r in 0..m {
            for (c, v) in problem.a.row(r) {
                ai.push(r);
                aj.push(c);
                av.push(v);
            }
        }
        let a = CscMatrix::new_from_triplets(m, n, ai, aj, av);

        let cones: Vec<SupportedConeT<f64>> = problem
            .cones
            .iter()
            .map(|c| match *c {
                Cone::Zero(k) => ZeroConeT(k),
                Cone::Nonnegative(k) => NonnegativeConeT(k),
                Cone::SecondOrder(k) => SecondOrderConeT(k),
            })
            .collect();

        let settings = DefaultSettings {
            verbose: self.verbose,
            max_iter: self.max_iter,
            tol_gap_abs: self.tolerance,
            tol_gap_rel: self.tolerance,
            tol_feas: self.tolerance,
            max_threads: 1,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &problem.q, &a, &problem.b, &cones, settings)
            .map_err(|e| Error::Backend(e.to_string()))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Solved,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            _ => SolveStatus::Failed,
        };
        Ok(BackendSolution { x: sol.x.clone(), status, objective: sol.obj_val, iterations: sol.iterations })
    }
}
