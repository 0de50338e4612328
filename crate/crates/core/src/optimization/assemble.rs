use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::backend::{BackendSolution, SolveStatus};
use super::{kappa_len, ConstraintSpec, ControllerPolicy, CostSpec, ExpectationMode, NormChoice, PolicyStatus};
use crate::error::{dim_err, Error, Result};
use crate::system::{block_diag_repeat, Dims, StackedSystem};
use crate::truncation::Buffers;

/// Row-compressed sparse matrix, filled one row at a time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseRows {
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SparseRows {
    pub fn new(ncols: usize) -> Self {
        Self { ncols, row_ptr: vec![0], cols: Vec::new(), vals: Vec::new() }
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Appends a row; exact zeros are dropped.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (c, v) in entries {
            debug_assert!(c < self.ncols);
            if v != 0.0 {
                self.cols.push(c);
                self.vals.push(v);
            }
        }
        self.row_ptr.push(self.cols.len());
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.row(i).map(|(c, v)| v * x[c]).sum()).collect()
    }

    fn append(&mut self, other: &SparseRows) {
        let shift = self.cols.len();
        self.cols.extend_from_slice(&other.cols);
        self.vals.extend_from_slice(&other.vals);
        self.row_ptr.extend(other.row_ptr[1..].iter().map(|p| p + shift));
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            for (c, v) in self.row(i) {
                m[(i, c)] += v;
            }
        }
        m
    }
}

/// Cone blocks in row order. Rows `s = b - A x` must lie in the cone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cone {
    Zero(usize),
    Nonnegative(usize),
    SecondOrder(usize),
}

impl Cone {
    pub fn dim(&self) -> usize {
        match *self {
            Cone::Zero(n) | Cone::Nonnegative(n) | Cone::SecondOrder(n) => n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Scenario,
    OpenLoop,
    Truncated,
}

/// Offsets of each variable group in the decision vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarLayout {
    pub gain: Range<usize>,
    pub v: Range<usize>,
    pub zeta: Range<usize>,
    pub abs: Range<usize>,
    pub lambda: Range<usize>,
    pub total: usize,
}

impl VarLayout {
    fn new(n_gain: usize, n_v: usize, n_zeta: usize, n_abs: usize, n_lambda: usize) -> Self {
        let mut at = 0;
        let mut next = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let gain = next(n_gain);
        let v = next(n_v);
        let zeta = next(n_zeta);
        let abs = next(n_abs);
        let lambda = next(n_lambda);
        Self { gain, v, zeta, abs, lambda, total: at }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AssemblyOptions {
    pub norm: NormChoice,
    /// Drops the gain variables, i.e. `K = 0`.
    pub force_zero_gain: bool,
    /// Restricts `K` to the convex hull of these causal gains.
    pub gain_hull: Option<Vec<DMatrix<f64>>>,
}

/// A conic program `min ½ xᵀPx + qᵀx + c  s.t.  b - A x ∈ cones`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub dims: Dims,
    pub ncx: usize,
    pub ncu: usize,
    pub layout: VarLayout,
    /// `(row, col)` of `K` for every gain variable.
    pub gain_index: Vec<(usize, usize)>,
    /// Upper triangle of `P`.
    pub p_upper: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub objective_constant: f64,
    pub a: SparseRows,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
    /// Rows generated by scenarios (state and input constraints).
    pub scenario_rows: usize,
    /// Rows encoding the gain norm bounds and `ζ >= 0`.
    pub norm_rows: usize,
}

impl ProblemSpec {
    pub fn n_vars(&self) -> usize {
        self.layout.total
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    /// `½ xᵀPx + qᵀx + c`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for &(i, j, v) in &self.p_upper {
            let w = if i == j { 0.5 } else { 1.0 };
            quad += w * v * x[i] * x[j];
        }
        quad + self.q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.objective_constant
    }

    /// Largest cone violation of `b - A x`; nonpositive when `x` is feasible.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let ax = self.a.mul(x);
        let mut worst = f64::NEG_INFINITY;
        let mut row = 0;
        for cone in &self.cones {
            let n = cone.dim();
            let s: Vec<f64> = (row..row + n).map(|i| self.b[i] - ax[i]).collect();
            let v = match cone {
                Cone::Zero(_) => s.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                Cone::Nonnegative(_) => s.iter().fold(f64::NEG_INFINITY, |m, v| m.max(-v)),
                Cone::SecondOrder(_) => s[1..].iter().map(|v| v * v).sum::<f64>().sqrt() - s[0],
            };
            worst = worst.max(v);
            row += n;
        }
        worst
    }

    pub fn is_feasible(&self, x: &[f64], tol: f64) -> bool {
        self.max_violation(x) <= tol
    }

    /// Decision vector for a given policy; auxiliary variables take their
    /// tightest values (`|K|` for the one-norm epigraph), hull weights are zero.
    pub fn point_from_policy(&self, policy: &ControllerPolicy) -> Vec<f64> {
        let mut x = vec![0.0; self.n_vars()];
        for (g, &(r, c)) in self.gain_index.iter().enumerate() {
            x[self.layout.gain.start + g] = policy.k[(r, c)];
            if !self.layout.abs.is_empty() {
                x[self.layout.abs.start + g] = policy.k[(r, c)].abs();
            }
        }
        for (i, v) in policy.v.iter().enumerate() {
            x[self.layout.v.start + i] = *v;
        }
        for (i, z) in policy.zeta.iter().enumerate().take(self.layout.zeta.len()) {
            x[self.layout.zeta.start + i] = *z;
        }
        x
    }

    pub fn policy_from_solution(&self, sol: &BackendSolution) -> ControllerPolicy {
        let d = self.dims;
        let x = &sol.x;
        let mut k = DMatrix::zeros(d.input_len(), d.disturbance_len());
        for (g, &(r, c)) in self.gain_index.iter().enumerate() {
            k[(r, c)] = x[self.layout.gain.start + g];
        }
        let v = DVector::from_column_slice(&x[self.layout.v.clone()]);
        let zeta = if self.layout.zeta.is_empty() {
            DVector::zeros(d.horizon)
        } else {
            DVector::from_column_slice(&x[self.layout.zeta.clone()])
        };
        let status = match sol.status {
            SolveStatus::Solved => PolicyStatus::Optimal,
            SolveStatus::Infeasible => PolicyStatus::Infeasible,
            SolveStatus::Failed => PolicyStatus::NumericalFailure,
        };
        let objective_value = if status == PolicyStatus::Optimal { self.objective(x) } else { f64::NAN };
        ControllerPolicy { k, v, zeta, objective_value, solver_status: status }
    }

    /// Writes `P.mtx`, `A.mtx`, `q.mtx`, `b.mtx` (Matrix Market) and `cones.txt`.
    pub fn write_matrix_market(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let n = self.n_vars();
        let mut f = BufWriter::new(fs::File::create(dir.join("P.mtx"))?);
        writeln!(f, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(f, "% objective 0.5 x'Px + q'x + {:e}", self.objective_constant)?;
        writeln!(f, "{n} {n} {}", self.p_upper.len())?;
        for &(i, j, v) in &self.p_upper {
            // symmetric storage keeps the lower triangle
            writeln!(f, "{} {} {:e}", j + 1, i + 1, v)?;
        }
        f.flush()?;

        let mut f = BufWriter::new(fs::File::create(dir.join("A.mtx"))?);
        writeln!(f, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(f, "{} {} {}", self.n_rows(), n, self.a.nnz())?;
        for i in 0..self.n_rows() {
            for (c, v) in self.a.row(i) {
                writeln!(f, "{} {} {:e}", i + 1, c + 1, v)?;
            }
        }
        f.flush()?;

        for (name, vec) in [("q.mtx", &self.q), ("b.mtx", &self.b)] {
            let mut f = BufWriter::new(fs::File::create(dir.join(name))?);
            writeln!(f, "%%MatrixMarket matrix array real general")?;
            writeln!(f, "{} 1", vec.len())?;
            for v in vec.iter() {
                writeln!(f, "{v:e}")?;
            }
            f.flush()?;
        }

        let mut f = BufWriter::new(fs::File::create(dir.join("cones.txt"))?);
        for c in &self.cones {
            let (name, n) = match c {
                Cone::Zero(n) => ("zero", n),
                Cone::Nonnegative(n) => ("nonnegative", n),
                Cone::SecondOrder(n) => ("second-order", n),
            };
            writeln!(f, "{name} {n}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Causal gain entries `(row, col)` in variable order.
fn gain_entries(d: Dims) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(kappa_len(d, d.horizon));
    for i in 1..d.horizon {
        for j in 0..i {
            for r in 0..d.nu {
                for c in 0..d.nw {
                    out.push((i * d.nu + r, j * d.nw + c));
                }
            }
        }
    }
    out
}

struct Context<'a> {
    stacked: &'a StackedSystem,
    cost: &'a CostSpec,
    dims: Dims,
    ncx: usize,
    ncu: usize,
    big_fx: DMatrix<f64>,
    big_fu: DMatrix<f64>,
    fx_gu: DMatrix<f64>,
    /// `Gx x0`
    base: DVector<f64>,
}

impl<'a> Context<'a> {
    fn new(
        stacked: &'a StackedSystem,
        constraints: &ConstraintSpec,
        cost: &'a CostSpec,
        x0: &DVector<f64>,
    ) -> Result<Self> {
        let dims = stacked.dims;
        constraints.validate()?;
        constraints.check_dims(dims)?;
        cost.validate(dims)?;
        let base = stacked.free_response(x0)?;
        let big_fx = constraints.stacked_fx(dims.horizon);
        let big_fu = constraints.stacked_fu(dims.horizon);
        let fx_gu = &big_fx * &stacked.gu;
        Ok(Self { stacked, cost, dims, ncx: constraints.ncx(), ncu: constraints.ncu(), big_fx, big_fu, fx_gu, base })
    }
}

struct Rows {
    zero: SparseRows,
    zero_b: Vec<f64>,
    nonneg: SparseRows,
    nonneg_b: Vec<f64>,
    soc: Vec<(SparseRows, Vec<f64>)>,
}

impl Rows {
    fn new(n: usize) -> Self {
        Self { zero: SparseRows::new(n), zero_b: Vec::new(), nonneg: SparseRows::new(n), nonneg_b: Vec::new(), soc: Vec::new() }
    }

    fn leq(&mut self, entries: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        self.nonneg.push_row(entries);
        self.nonneg_b.push(rhs);
    }

    fn finish(self) -> (SparseRows, Vec<f64>, Vec<Cone>) {
        let mut a = SparseRows::new(self.zero.ncols);
        let mut b = Vec::new();
        let mut cones = Vec::new();
        if self.zero.nrows() > 0 {
            cones.push(Cone::Zero(self.zero.nrows()));
            a.append(&self.zero);
            b.extend(self.zero_b);
        }
        if self.nonneg.nrows() > 0 {
            cones.push(Cone::Nonnegative(self.nonneg.nrows()));
            a.append(&self.nonneg);
            b.extend(self.nonneg_b);
        }
        for (rows, rhs) in self.soc {
            cones.push(Cone::SecondOrder(rows.nrows()));
            a.append(&rows);
            b.extend(rhs);
        }
        (a, b, cones)
    }
}

struct Spec<'b> {
    kind: ProblemKind,
    with_gain: bool,
    /// Input constraints are evaluated per scenario (otherwise once, on `V`).
    per_scenario_inputs: bool,
    buffers: Option<&'b Buffers>,
    norm: Option<NormChoice>,
    hull: Option<&'b [DMatrix<f64>]>,
}

fn build(ctx: &Context, scenarios: &DMatrix<f64>, spec: Spec) -> Result<ProblemSpec> {
    let d = ctx.dims;
    let p = d.horizon;
    if scenarios.ncols() == 0 {
        return Err(Error::EmptySubset);
    }
    if scenarios.nrows() != d.disturbance_len() {
        return dim_err(format!("scenarios have length {}, expected {}", scenarios.nrows(), d.disturbance_len()));
    }

    let gain_index = if spec.with_gain { gain_entries(d) } else { Vec::new() };
    let ng = gain_index.len();
    let nv = d.input_len();
    let n_zeta = if spec.norm.is_some() { p } else { 0 };
    let n_abs = if spec.norm == Some(NormChoice::One) { ng } else { 0 };
    let n_lambda = spec.hull.map(|h| h.len()).unwrap_or(0);
    let layout = VarLayout::new(ng, nv, n_zeta, n_abs, n_lambda);
    let n = layout.total;

    let zero_ol = vec![0.0; p * ctx.ncx];
    let (eps_cl, eps_ol, eps_u) = match spec.buffers {
        Some(b) => {
            if b.eps_ol.len() != p * ctx.ncx {
                return dim_err(format!("state buffer has length {}, expected {}", b.eps_ol.len(), p * ctx.ncx));
            }
            for (name, v) in [("eps_cl", b.eps_cl), ("eps_u", b.eps_u)].into_iter().chain(b.eps_ol.iter().map(|&v| ("eps_ol", v))) {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::InvalidConstraints(format!("{name} = {v} must be finite and nonnegative")));
                }
            }
            if let Some((row, &value)) = b.eps_ol.iter().enumerate().find(|(_, &v)| v > 1.0) {
                return Err(Error::BufferExceedsUnity { time: row / ctx.ncx + 1, constraint: row % ctx.ncx, value });
            }
            (b.eps_cl, b.eps_ol.as_slice(), b.eps_u)
        }
        None => (0.0, zero_ol.as_slice(), 0.0),
    };

    let mut rows = Rows::new(n);

    if let Some(hull) = spec.hull {
        if hull.is_empty() {
            return Err(Error::InvalidConstraints("gain hull needs at least one vertex".into()));
        }
        for (h, vert) in hull.iter().enumerate() {
            if vert.shape() != (d.input_len(), d.disturbance_len()) {
                return dim_err(format!("gain hull vertex {h} has the wrong shape"));
            }
            let causal = (0..vert.nrows()).all(|r| (0..vert.ncols()).all(|c| r / d.nu > c / d.nw || vert[(r, c)] == 0.0));
            if !causal {
                return Err(Error::InvalidConstraints(format!("gain hull vertex {h} is not strictly block lower triangular")));
            }
        }
        for (g, &(r, c)) in gain_index.iter().enumerate() {
            let entries = std::iter::once((layout.gain.start + g, 1.0))
                .chain(hull.iter().enumerate().map(|(h, vert)| (layout.lambda.start + h, -vert[(r, c)])));
            rows.zero.push_row(entries);
            rows.zero_b.push(0.0);
        }
        rows.zero.push_row(layout.lambda.clone().map(|i| (i, 1.0)));
        rows.zero_b.push(1.0);
    }

    // scenario rows
    let mut scenario_rows = 0;
    let gw_w = &ctx.stacked.gw * scenarios;
    for i in 0..scenarios.ncols() {
        let w = scenarios.column(i);
        let offset = &ctx.big_fx * (&ctx.base + gw_w.column(i));
        for row in 0..p * ctx.ncx {
            let t = row / ctx.ncx;
            let gains = gain_index.iter().enumerate().filter_map(|(g, &(l, c))| {
                let a = ctx.fx_gu[(row, l)];
                (a != 0.0).then(|| (layout.gain.start + g, a * w[c]))
            });
            let inputs = (0..nv).map(|l| (layout.v.start + l, ctx.fx_gu[(row, l)]));
            let zeta = (eps_cl != 0.0 && n_zeta > 0).then(|| (layout.zeta.start + t, eps_cl));
            rows.leq(gains.chain(inputs).chain(zeta), 1.0 - eps_ol[row] - offset[row]);
            scenario_rows += 1;
        }
        if spec.per_scenario_inputs || i == 0 {
            for row in 0..p * ctx.ncu {
                let t = row / ctx.ncu;
                let block = t * d.nu..(t + 1) * d.nu;
                let gains = gain_index.iter().enumerate().filter_map(|(g, &(l, c))| {
                    block.contains(&l).then(|| (layout.gain.start + g, ctx.big_fu[(row, l)] * w[c]))
                });
                let inputs = block.clone().map(|l| (layout.v.start + l, ctx.big_fu[(row, l)]));
                let zeta = (eps_u != 0.0 && n_zeta > 0).then(|| (layout.zeta.start + t, eps_u));
                rows.leq(gains.chain(inputs).chain(zeta), 1.0);
                scenario_rows += 1;
            }
        }
    }

    // norm coupling
    let mut norm_rows = 0;
    if let Some(norm) = spec.norm {
        for t in 0..p {
            rows.leq([(layout.zeta.start + t, -1.0)], 0.0);
            norm_rows += 1;
        }
        match norm {
            NormChoice::One => {
                for g in 0..ng {
                    rows.leq([(layout.gain.start + g, 1.0), (layout.abs.start + g, -1.0)], 0.0);
                    rows.leq([(layout.gain.start + g, -1.0), (layout.abs.start + g, -1.0)], 0.0);
                    norm_rows += 2;
                }
                for t in 2..=p {
                    let len = kappa_len(d, t).min(ng);
                    if len == 0 {
                        continue;
                    }
                    let entries = (0..len).map(|g| (layout.abs.start + g, 1.0)).chain([(layout.zeta.start + t - 1, -1.0)]);
                    rows.leq(entries, 0.0);
                    norm_rows += 1;
                }
            }
            NormChoice::Two => {
                for t in 2..=p {
                    let len = kappa_len(d, t).min(ng);
                    if len == 0 {
                        continue;
                    }
                    let mut cone = SparseRows::new(n);
                    cone.push_row([(layout.zeta.start + t - 1, -1.0)]);
                    for g in 0..len {
                        cone.push_row([(layout.gain.start + g, -1.0)]);
                    }
                    norm_rows += cone.nrows();
                    rows.soc.push((cone, vec![0.0; len + 1]));
                }
            }
        }
    }
    if let Some(hull) = spec.hull {
        for h in 0..hull.len() {
            rows.leq([(layout.lambda.start + h, -1.0)], 0.0);
        }
    }

    let (p_upper, q, objective_constant) = objective_terms(ctx, scenarios, &gain_index, &layout);
    let (a, b, cones) = rows.finish();
    Ok(ProblemSpec {
        kind: spec.kind,
        dims: d,
        ncx: ctx.ncx,
        ncu: ctx.ncu,
        layout,
        gain_index,
        p_upper,
        q,
        objective_constant,
        a,
        b,
        cones,
        scenario_rows,
        norm_rows,
    })
}

type ObjectiveTerms = (Vec<(usize, usize, f64)>, Vec<f64>, f64);

/// Quadratic cost over `(gain, V)`, returned as `(upper(P), q, constant)`
/// with `J = ½ xᵀPx + qᵀx + constant`.
fn objective_terms(ctx: &Context, scenarios: &DMatrix<f64>, gain_index: &[(usize, usize)], layout: &VarLayout) -> ObjectiveTerms {
    let d = ctx.dims;
    let p = d.horizon;
    let qbar = block_diag_repeat(&ctx.cost.q, p);
    let rbar = block_diag_repeat(&ctx.cost.r, p);
    let gu = &ctx.stacked.gu;
    let hu = gu.transpose() * &qbar * gu + &rbar;
    let gtq = gu.transpose() * &qbar;
    let reference = ctx.cost.reference_vec(d.state_len());
    let ng = gain_index.len();
    let nv = d.input_len();
    let nkv = ng + nv;

    let (h, g, c) = match ctx.cost.expectation {
        ExpectationMode::Nominal => {
            let dev = &ctx.base - &reference;
            let mut h = DMatrix::zeros(nkv, nkv);
            h.view_mut((ng, ng), (nv, nv)).copy_from(&hu);
            let mut g = DVector::zeros(nkv);
            g.rows_mut(ng, nv).copy_from(&(&gtq * &dev));
            let c = dev.dot(&(&qbar * &dev));
            (h, g, c)
        }
        ExpectationMode::ScenarioMean => {
            let count = scenarios.ncols() as f64;
            let mut h = DMatrix::zeros(nkv, nkv);
            let mut g = DVector::zeros(nkv);
            let mut c = 0.0;
            let gw_w = &ctx.stacked.gw * scenarios;
            let mut m = DMatrix::zeros(nv, nkv);
            for l in 0..nv {
                m[(l, ng + l)] = 1.0;
            }
            for i in 0..scenarios.ncols() {
                let w = scenarios.column(i);
                for (k, &(l, col)) in gain_index.iter().enumerate() {
                    m[(l, k)] = w[col];
                }
                let dev = &ctx.base + gw_w.column(i) - &reference;
                let mt = m.transpose();
                h += &mt * &hu * &m;
                g += &mt * (&gtq * &dev);
                c += dev.dot(&(&qbar * &dev));
            }
            (h / count, g / count, c / count)
        }
    };

    let mut p_upper = Vec::new();
    for j in 0..nkv {
        for i in 0..=j {
            let v = h[(i, j)] + h[(j, i)];
            if v != 0.0 {
                p_upper.push((i, j, v));
            }
        }
    }
    debug_assert_eq!(layout.gain.start, 0);
    debug_assert_eq!(layout.v.start, ng);
    let mut q = vec![0.0; layout.total];
    for k in 0..nkv {
        q[k] = 2.0 * g[k];
    }
    (p_upper, q, c)
}

/// Plain scenario program over all `scenarios` (columns are stacked
/// disturbances): `F^x X^(i) <= 1`, `F^u (K W^(i) + V) <= 1`.
pub fn assemble_scenario_problem(
    stacked: &StackedSystem,
    constraints: &ConstraintSpec,
    cost: &CostSpec,
    scenarios: &DMatrix<f64>,
    x0: &DVector<f64>,
) -> Result<ProblemSpec> {
    let ctx = Context::new(stacked, constraints, cost, x0)?;
    build(
        &ctx,
        scenarios,
        Spec { kind: ProblemKind::Scenario, with_gain: true, per_scenario_inputs: true, buffers: None, norm: None, hull: None },
    )
}

/// Open-loop program over `V` with state buffers `eps_x` (one per stacked
/// state constraint row): `F^x X^(i) <= 1 - eps_x`, `F^u V <= 1`.
pub fn assemble_openloop_problem(
    stacked: &StackedSystem,
    constraints: &ConstraintSpec,
    cost: &CostSpec,
    scenarios_hat: &DMatrix<f64>,
    eps_x: &[f64],
    x0: &DVector<f64>,
) -> Result<ProblemSpec> {
    let ctx = Context::new(stacked, constraints, cost, x0)?;
    let buffers = Buffers { eps_cl: 0.0, eps_ol: eps_x.to_vec(), eps_u: 0.0 };
    build(
        &ctx,
        scenarios_hat,
        Spec {
            kind: ProblemKind::OpenLoop,
            with_gain: false,
            per_scenario_inputs: false,
            buffers: Some(&buffers),
            norm: None,
            hull: None,
        },
    )
}

/// Truncated closed-loop program over `(K, V, ζ)`:
///
/// ```text
/// F^x X^(i)         <= 1 - eps_cl ζ^x - eps_ol
/// F^u (K W^(i) + V) <= 1 - eps_u ζ^u
/// ‖κ_t‖             <= ζ_t,   ζ_t >= 0
/// ```
///
/// where `ζ^x`, `ζ^u` repeat `ζ_t` over the constraint rows of step `t`.
pub fn assemble_truncated_problem(
    stacked: &StackedSystem,
    constraints: &ConstraintSpec,
    cost: &CostSpec,
    scenarios_hat: &DMatrix<f64>,
    buffers: &Buffers,
    x0: &DVector<f64>,
    options: &AssemblyOptions,
) -> Result<ProblemSpec> {
    let ctx = Context::new(stacked, constraints, cost, x0)?;
    let with_gain = !options.force_zero_gain;
    build(
        &ctx,
        scenarios_hat,
        Spec {
            kind: ProblemKind::Truncated,
            with_gain,
            per_scenario_inputs: with_gain,
            buffers: Some(buffers),
            norm: Some(options.norm),
            hull: if with_gain { options.gain_hull.as_deref() } else { None },
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimization::{solve, ClarabelBackend};
    use crate::system::LinearSystem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plant(p: usize) -> StackedSystem {
        LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.1, 0.5]),
            DMatrix::identity(2, 2),
            p,
        )
        .unwrap()
        .stack()
    }

    fn constraints() -> ConstraintSpec {
        ConstraintSpec::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, -0.5, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.5, -0.5]),
        )
        .unwrap()
    }

    fn scenarios(n: usize, p: usize, scale: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(2 * p, n, |_, _| scale * rng.random_range(-1.0..1.0))
    }

    #[test]
    fn unconstrained_optimum_matches_normal_equations() {
        let st = plant(3);
        let cost = CostSpec::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1);
        // loose constraints so nothing is active
        let c = ConstraintSpec::new(DMatrix::identity(2, 2) * 1e-3, DMatrix::identity(1, 1) * 1e-3).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -0.5]);
        let prob = assemble_openloop_problem(&st, &c, &cost, &scenarios(4, 3, 0.01, 1), &[0.0; 6], &x0).unwrap();
        let pol = solve(&prob, &ClarabelBackend::default()).unwrap();
        assert!(pol.is_optimal());

        let qbar = DMatrix::<f64>::identity(6, 6);
        let rbar = DMatrix::<f64>::identity(3, 3) * 0.1;
        let h = st.gu.transpose() * &qbar * &st.gu + rbar;
        let g = st.gu.transpose() * &qbar * (&st.gx * &x0);
        let v = -h.clone().cholesky().unwrap().solve(&g);
        assert!((&pol.v - &v).amax() < 1e-6, "{} vs {}", pol.v, v);
        let free = &st.gx * &x0;
        let j = (&free + &st.gu * &v).norm_squared() + 0.1 * v.norm_squared();
        assert!((pol.objective_value - j).abs() < 1e-6);
    }

    #[test]
    fn zero_buffers_reduce_to_the_scenario_program() {
        let st = plant(3);
        let cost = CostSpec::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1)
            .with_expectation(ExpectationMode::ScenarioMean);
        let x0 = DVector::from_vec(vec![0.5, 0.0]);
        let w = scenarios(6, 3, 0.2, 2);
        let full = assemble_scenario_problem(&st, &constraints(), &cost, &w, &x0).unwrap();
        let trunc = assemble_truncated_problem(&st, &constraints(), &cost, &w, &Buffers::zero(6), &x0, &AssemblyOptions::default())
            .unwrap();
        assert_eq!(full.scenario_rows, trunc.scenario_rows);
        let ng = full.gain_index.len();
        let nv = full.layout.v.len();
        let a_full = full.a.to_dense();
        let a_tr = trunc.a.to_dense();
        // scenario rows come first in the nonnegative block
        for r in 0..full.scenario_rows {
            for c in 0..ng + nv {
                assert_eq!(a_full[(r, c)], a_tr[(r, c)]);
            }
            for c in ng + nv..trunc.n_vars() {
                assert_eq!(a_tr[(r, c)], 0.0);
            }
            assert_eq!(full.b[r], trunc.b[r]);
        }

        let be = ClarabelBackend::default();
        let pf = solve(&full, &be).unwrap();
        let pt = solve(&trunc, &be).unwrap();
        assert!(pf.is_optimal() && pt.is_optimal());
        assert!((pf.objective_value - pt.objective_value).abs() < 1e-6 * (1.0 + pf.objective_value.abs()));
    }

    #[test]
    fn buffer_above_one_is_rejected() {
        let st = plant(2);
        let cost = CostSpec::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1));
        let mut buf = Buffers::zero(4);
        buf.eps_ol[3] = 1.5;
        let err = assemble_truncated_problem(&st, &constraints(), &cost, &scenarios(2, 2, 0.1, 3), &buf, &DVector::zeros(2), &AssemblyOptions::default());
        assert!(matches!(err, Err(Error::BufferExceedsUnity { time: 2, constraint: 1, .. })));
    }

    #[test]
    fn norm_rows_bound_gain_prefixes() {
        let st = plant(4);
        let cost = CostSpec::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1));
        let buf = Buffers { eps_cl: 0.1, eps_ol: vec![0.01; 8], eps_u: 0.05 };
        let w = scenarios(3, 4, 0.1, 4);
        for norm in [NormChoice::One, NormChoice::Two] {
            let opts = AssemblyOptions { norm, ..Default::default() };
            let prob = assemble_truncated_problem(&st, &constraints(), &cost, &w, &buf, &DVector::zeros(2), &opts).unwrap();
            let d = st.dims;
            let mut k = DMatrix::zeros(d.input_len(), d.disturbance_len());
            for &(r, c) in &prob.gain_index {
                k[(r, c)] = 0.01 * (r as f64 - c as f64);
            }
            let mut zeta = DVector::zeros(4);
            for t in 1..=4 {
                let kap = crate::optimization::kappa(&k, d, t).unwrap();
                zeta[t - 1] = match norm {
                    NormChoice::One => kap.iter().map(|v| v.abs()).sum(),
                    NormChoice::Two => kap.norm(),
                };
            }
            let mut pol = ControllerPolicy::open_loop(DVector::zeros(4), d).unwrap();
            pol.k = k;
            pol.zeta = zeta.clone();
            let x = prob.point_from_policy(&pol);
            assert!(prob.is_feasible(&x, 1e-12), "{norm:?}: {}", prob.max_violation(&x));
            // shrinking any ζ_t with nonempty κ_t breaks a norm row
            for t in 2..=4 {
                let mut small = pol.clone();
                small.zeta[t - 1] *= 0.9;
                assert!(!prob.is_feasible(&prob.point_from_policy(&small), 1e-12));
            }
        }
    }

    #[test]
    fn matrix_market_export_round_trips_sizes() {
        let st = plant(2);
        let cost = CostSpec::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1));
        let prob = assemble_scenario_problem(&st, &constraints(), &cost, &scenarios(3, 2, 0.1, 5), &DVector::zeros(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        prob.write_matrix_market(dir.path()).unwrap();
        let a = std::fs::read_to_string(dir.path().join("A.mtx")).unwrap();
        let header = a.lines().nth(1).unwrap();
        assert_eq!(header, format!("{} {} {}", prob.n_rows(), prob.n_vars(), prob.a.nnz()));
        let cones = std::fs::read_to_string(dir.path().join("cones.txt")).unwrap();
        assert_eq!(cones.trim(), format!("nonnegative {}", prob.n_rows()));
    }
}
