//! Truncation mapping, coordinate-extreme approximation error and the greedy
//! selection of dominant scenarios.
//!
//! A scenario `W` is mapped to `S(W) = [S_cl; S_ol; S_u] W` where
//!
//! * `S_cl` is the lifted left factor of `F^x Gu` (the gain-dependent part of
//!   the state constraints, with the gain moved out front),
//! * `S_ol = F^x Gw` (the gain-free part of the state constraints),
//! * `S_u` is the lifted left factor of `F^u` (the gain-dependent part of the
//!   input constraints).
//!
//! The approximation error of a subset is measured per coordinate of the
//! mapped point cloud, as the amount by which the subset falls short of the
//! full cloud's maximum or minimum on that coordinate. Its ∞-norm is the
//! distance `d_H` that the greedy selection drives down.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scenarios::ScenarioSet;
use crate::system::{block_diag_repeat, lift_left, lift_right, StackedSystem};

/// Row counts of the three stacked blocks of a mapping or point cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub cl: usize,
    pub ol: usize,
    pub u: usize,
}

impl Partition {
    /// A partition that treats every row as gain-free.
    pub fn single(rows: usize) -> Self {
        Self { cl: 0, ol: rows, u: 0 }
    }

    pub fn total(&self) -> usize {
        self.cl + self.ol + self.u
    }
}

/// Coordinates of one lifted row: it equals `left[constraint_row, gain_row] * W[gain_col]`
/// and is multiplied by the gain entry `K[gain_row, gain_col]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftedRow {
    pub gain_row: usize,
    pub gain_col: usize,
    pub constraint_row: usize,
}

impl LiftedRow {
    /// Row index in the unpruned lift, `(gain_row * m + gain_col) * n + constraint_row`.
    pub fn unpruned_index(&self, m: usize, n: usize) -> usize {
        (self.gain_row * m + self.gain_col) * n + self.constraint_row
    }
}

/// Block sparsity of a left factor, counted in time blocks.
#[derive(Clone, Copy, Debug)]
enum BlockPattern {
    /// Block `(t, s)` may be nonzero for `s <= t` (e.g. `F^x Gu`).
    LowerInclusive,
    /// Only diagonal blocks may be nonzero (e.g. `F^u = I ⊗ f^u`).
    Diagonal,
}

/// The linear map `S` applied to every scenario before truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncationMapping {
    s: DMatrix<f64>,
    partition: Partition,
    cl_rows: Vec<LiftedRow>,
    u_rows: Vec<LiftedRow>,
    pruned: bool,
    horizon: usize,
    nu: usize,
    nw: usize,
    ncx: usize,
    ncu: usize,
}

/// Builds the closed-loop mapping for stage constraints `fx` (`n_cx x n_x`)
/// and `fu` (`n_cu x n_u`).
///
/// With `prune` set, lifted rows whose gain entry is structurally zero
/// (input block not later than the disturbance block) or whose left-factor
/// block is structurally zero are dropped. The dropped rows never contribute
/// to `F^x Gu K W` or `F^u K W` for a causal gain.
pub fn build_truncation_mapping(
    fx: &DMatrix<f64>,
    fu: &DMatrix<f64>,
    stacked: &StackedSystem,
    prune: bool,
) -> Result<TruncationMapping> {
    let d = stacked.dims;
    if fx.ncols() != d.nx || fx.nrows() == 0 {
        return dim_err(format!("state constraint matrix must be n_cx x {}, got {}x{}", d.nx, fx.nrows(), fx.ncols()));
    }
    if fu.ncols() != d.nu || fu.nrows() == 0 {
        return dim_err(format!("input constraint matrix must be n_cu x {}, got {}x{}", d.nu, fu.nrows(), fu.ncols()));
    }
    let p = d.horizon;
    let (ncx, ncu) = (fx.nrows(), fu.nrows());
    let big_fx = block_diag_repeat(fx, p);
    let big_fu = block_diag_repeat(fu, p);
    let fx_gu = &big_fx * &stacked.gu;
    let s_ol = &big_fx * &stacked.gw;

    let m = d.disturbance_len();
    let (cl_rows, s_cl) = lifted_block(&fx_gu, m, ncx, d.nu, d.nw, BlockPattern::LowerInclusive, prune);
    let (u_rows, s_u) = lifted_block(&big_fu, m, ncu, d.nu, d.nw, BlockPattern::Diagonal, prune);

    let partition = Partition { cl: s_cl.nrows(), ol: s_ol.nrows(), u: s_u.nrows() };
    let mut s = DMatrix::zeros(partition.total(), m);
    s.rows_mut(0, partition.cl).copy_from(&s_cl);
    s.rows_mut(partition.cl, partition.ol).copy_from(&s_ol);
    s.rows_mut(partition.cl + partition.ol, partition.u).copy_from(&s_u);

    Ok(TruncationMapping { s, partition, cl_rows, u_rows, pruned: prune, horizon: p, nu: d.nu, nw: d.nw, ncx, ncu })
}

fn lifted_block(
    left: &DMatrix<f64>,
    m: usize,
    nc: usize,
    nu: usize,
    nw: usize,
    pattern: BlockPattern,
    prune: bool,
) -> (Vec<LiftedRow>, DMatrix<f64>) {
    let (n, z) = left.shape();
    let full = lift_left(left, m);
    let mut rows = Vec::new();
    for l in 0..z {
        for j in 0..m {
            for r in 0..n {
                let keep = !prune || {
                    let (in_block, dist_block, time_block) = (l / nu, j / nw, r / nc);
                    let gain_free = in_block > dist_block;
                    let left_free = match pattern {
                        BlockPattern::LowerInclusive => in_block <= time_block,
                        BlockPattern::Diagonal => in_block == time_block,
                    };
                    gain_free && left_free
                };
                if keep {
                    rows.push(LiftedRow { gain_row: l, gain_col: j, constraint_row: r });
                }
            }
        }
    }
    let idx: Vec<usize> = rows.iter().map(|lr| lr.unpruned_index(m, n)).collect();
    let block = full.select_rows(idx.iter());
    (rows, block)
}

impl TruncationMapping {
    /// Gain-free mapping `F^x Gw` used when the policy has no feedback.
    pub fn open_loop(fx: &DMatrix<f64>, stacked: &StackedSystem) -> Result<Self> {
        let d = stacked.dims;
        if fx.ncols() != d.nx || fx.nrows() == 0 {
            return dim_err(format!("state constraint matrix must be n_cx x {}, got {}x{}", d.nx, fx.nrows(), fx.ncols()));
        }
        let s = block_diag_repeat(fx, d.horizon) * &stacked.gw;
        Ok(Self {
            partition: Partition::single(s.nrows()),
            s,
            cl_rows: Vec::new(),
            u_rows: Vec::new(),
            pruned: true,
            horizon: d.horizon,
            nu: d.nu,
            nw: d.nw,
            ncx: fx.nrows(),
            ncu: 0,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    pub fn is_pruned(&self) -> bool {
        self.pruned
    }

    pub fn cl_rows(&self) -> &[LiftedRow] {
        &self.cl_rows
    }

    pub fn u_rows(&self) -> &[LiftedRow] {
        &self.u_rows
    }

    /// Number of rows of the unpruned `S_cl` and `S_u` lifts.
    pub fn unpruned_lift_rows(&self) -> (usize, usize) {
        let lifted = (self.horizon * self.nu) * (self.horizon * self.nw);
        (lifted * self.horizon * self.ncx, lifted * self.horizon * self.ncu)
    }

    pub fn s_cl(&self) -> DMatrix<f64> {
        self.s.rows(0, self.partition.cl).into_owned()
    }

    pub fn s_ol(&self) -> DMatrix<f64> {
        self.s.rows(self.partition.cl, self.partition.ol).into_owned()
    }

    pub fn s_u(&self) -> DMatrix<f64> {
        self.s.rows(self.partition.cl + self.partition.ol, self.partition.u).into_owned()
    }

    fn lifted_gain(&self, k: &DMatrix<f64>, rows: &[LiftedRow], n: usize) -> Result<DMatrix<f64>> {
        let (pu, pw) = (self.horizon * self.nu, self.horizon * self.nw);
        if k.shape() != (pu, pw) {
            return dim_err(format!("gain must be {pu}x{pw}, got {}x{}", k.nrows(), k.ncols()));
        }
        let full = lift_right(k, n);
        let idx: Vec<usize> = rows.iter().map(|lr| lr.unpruned_index(pw, n)).collect();
        Ok(full.select_columns(idx.iter()))
    }

    /// Lifted state gain restricted to the retained `S_cl` rows, so that
    /// `F^x Gu K = lifted_state_gain(K) * S_cl` for any causal `K`.
    pub fn lifted_state_gain(&self, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lifted_gain(k, &self.cl_rows, self.horizon * self.ncx)
    }

    /// Lifted input gain restricted to the retained `S_u` rows, so that
    /// `F^u K = lifted_input_gain(K) * S_u` for any causal `K`.
    pub fn lifted_input_gain(&self, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lifted_gain(k, &self.u_rows, self.horizon * self.ncu)
    }
}

/// Mapped scenarios: column `i` is `S W^(i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: DMatrix<f64>,
    pub partition: Partition,
}

impl PointCloud {
    pub fn new(points: DMatrix<f64>, partition: Partition) -> Result<Self> {
        if partition.total() != points.nrows() {
            return dim_err(format!("partition covers {} rows, cloud has {}", partition.total(), points.nrows()));
        }
        Ok(Self { points, partition })
    }

    /// A cloud without gain-dependent blocks.
    pub fn unpartitioned(points: DMatrix<f64>) -> Self {
        let partition = Partition::single(points.nrows());
        Self { points, partition }
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }
}

pub fn map_scenarios(mapping: &TruncationMapping, scenarios: &ScenarioSet) -> Result<PointCloud> {
    let w = scenarios.matrix();
    if w.nrows() != mapping.s.ncols() {
        return dim_err(format!("scenarios have length {}, mapping expects {}", w.nrows(), mapping.s.ncols()));
    }
    PointCloud::new(&mapping.s * w, mapping.partition)
}

fn check_subset(cloud: &PointCloud, subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= cloud.len()) {
        return Err(Error::IndexOutOfRange { index: bad, len: cloud.len() });
    }
    Ok(())
}

fn row_extremes(points: &DMatrix<f64>, cols: impl Iterator<Item = usize> + Clone) -> (Vec<f64>, Vec<f64>) {
    let d = points.nrows();
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut lo = vec![f64::INFINITY; d];
    for c in cols {
        for (k, &v) in points.column(c).iter().enumerate() {
            hi[k] = hi[k].max(v);
            lo[k] = lo[k].min(v);
        }
    }
    (hi, lo)
}

#[inline]
fn coord_gap(full_hi: f64, full_lo: f64, sub_hi: f64, sub_lo: f64) -> f64 {
    (full_hi - sub_hi).max(sub_lo - full_lo).max(0.0)
}

/// Per-coordinate shortfall of the subset's extremes against the full cloud.
pub fn epsilon_vector(cloud: &PointCloud, subset: &[usize]) -> Result<DVector<f64>> {
    check_subset(cloud, subset)?;
    let (fh, fl) = row_extremes(&cloud.points, 0..cloud.len());
    let (sh, sl) = row_extremes(&cloud.points, subset.iter().copied());
    Ok(DVector::from_fn(cloud.dim(), |k, _| coord_gap(fh[k], fl[k], sh[k], sl[k])))
}

/// `d_H` of a subset: the ∞-norm of its [`epsilon_vector`].
///
/// ```
/// use nalgebra::DMatrix;
/// use scenario_truncation::truncation::{hausdorff_distance, PointCloud};
///
/// // unit square corners, one per column
/// let pts = DMatrix::from_row_slice(2, 4, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
/// let cloud = PointCloud::unpartitioned(pts);
/// assert_eq!(hausdorff_distance(&cloud, &[0]).unwrap(), 1.0);
/// assert_eq!(hausdorff_distance(&cloud, &[0, 1, 2, 3]).unwrap(), 0.0);
/// ```
pub fn hausdorff_distance(cloud: &PointCloud, subset: &[usize]) -> Result<f64> {
    Ok(epsilon_vector(cloud, subset)?.amax())
}

/// Buffer magnitudes extracted from an error vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Buffers {
    pub eps_cl: f64,
    pub eps_ol: Vec<f64>,
    pub eps_u: f64,
}

impl Buffers {
    pub fn zero(ol_len: usize) -> Self {
        Self { eps_cl: 0.0, eps_ol: vec![0.0; ol_len], eps_u: 0.0 }
    }

    pub fn max(&self) -> f64 {
        self.eps_ol.iter().copied().fold(self.eps_cl.max(self.eps_u), f64::max)
    }
}

pub fn compute_buffers(epsilon: &[f64], partition: Partition) -> Result<Buffers> {
    if partition.total() != epsilon.len() {
        return dim_err(format!("partition covers {} entries, epsilon has {}", partition.total(), epsilon.len()));
    }
    let inf = |s: &[f64]| s.iter().copied().fold(0.0, f64::max);
    let (cl, rest) = epsilon.split_at(partition.cl);
    let (ol, u) = rest.split_at(partition.ol);
    Ok(Buffers { eps_cl: inf(cl), eps_ol: ol.to_vec(), eps_u: inf(u) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Stop after this many scenarios.
    MaxPoints(usize),
    /// Stop once `d_H` is at or below this value.
    TargetEps(f64),
}

/// One row of the error-versus-size curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_selected: usize,
    pub d_h: f64,
    pub eps_cl: f64,
    pub eps_ol: f64,
    pub eps_u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationResult {
    /// Scenario indices (0-based) in insertion order.
    pub selected: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub partition: Partition,
    pub eps_cl: f64,
    pub eps_ol: Vec<f64>,
    pub eps_u: f64,
    pub d_h: f64,
    pub curve: Vec<CurvePoint>,
}

impl TruncationResult {
    pub fn buffers(&self) -> Buffers {
        Buffers { eps_cl: self.eps_cl, eps_ol: self.eps_ol.clone(), eps_u: self.eps_u }
    }
}

/// Greedy ε-approximate hull selection.
///
/// Seeds with the column farthest (∞-norm) from column 0, then repeatedly
/// appends the candidate whose insertion minimizes `d_H`, breaking ties by
/// lowest index. Stops when the rule fires or `d_H` reaches zero.
pub fn greedy_truncate(cloud: &PointCloud, stop: StopRule) -> Result<TruncationResult> {
    match stop {
        StopRule::MaxPoints(0) => return Err(Error::InvalidStopRule("max_points must be at least 1".into())),
        StopRule::TargetEps(e) if !(e >= 0.0) => {
            return Err(Error::InvalidStopRule(format!("target_eps must be nonnegative, got {e}")))
        }
        _ => {}
    }
    if cloud.is_empty() {
        return Err(Error::EmptySubset);
    }
    let pts = &cloud.points;
    let n = cloud.len();
    let (fh, fl) = row_extremes(pts, 0..n);

    let first = pts.column(0);
    let seed = (0..n)
        .map(|i| (pts.column(i) - first).amax())
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |best, (i, dist)| if dist > best.1 { (i, dist) } else { best })
        .0;

    let mut selected = vec![seed];
    let mut in_set = vec![false; n];
    in_set[seed] = true;
    let mut sh: Vec<f64> = pts.column(seed).iter().copied().collect();
    let mut sl = sh.clone();

    let eps_of = |sh: &[f64], sl: &[f64]| -> Vec<f64> {
        (0..fh.len()).map(|k| coord_gap(fh[k], fl[k], sh[k], sl[k])).collect()
    };
    let mut eps = eps_of(&sh, &sl);
    let mut curve = vec![curve_point(1, &eps, cloud.partition)?];

    loop {
        let d_h = curve.last().unwrap().d_h;
        let done = match stop {
            StopRule::MaxPoints(max) => selected.len() >= max,
            StopRule::TargetEps(target) => d_h <= target,
        };
        if done || d_h == 0.0 || selected.len() == n {
            break;
        }
        let (best, _) = (0..n)
            .into_par_iter()
            .filter(|&c| !in_set[c])
            .map(|c| {
                let col = pts.column(c);
                let mut worst = 0.0f64;
                for k in 0..fh.len() {
                    let v = col[k];
                    worst = worst.max(coord_gap(fh[k], fl[k], sh[k].max(v), sl[k].min(v)));
                }
                (c, worst)
            })
            .reduce(
                || (usize::MAX, f64::INFINITY),
                |a, b| if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a },
            );
        in_set[best] = true;
        selected.push(best);
        for (k, &v) in pts.column(best).iter().enumerate() {
            sh[k] = sh[k].max(v);
            sl[k] = sl[k].min(v);
        }
        eps = eps_of(&sh, &sl);
        curve.push(curve_point(selected.len(), &eps, cloud.partition)?);
    }

    let buffers = compute_buffers(&eps, cloud.partition)?;
    let d_h = curve.last().unwrap().d_h;
    Ok(TruncationResult {
        selected,
        epsilon: eps,
        partition: cloud.partition,
        eps_cl: buffers.eps_cl,
        eps_ol: buffers.eps_ol,
        eps_u: buffers.eps_u,
        d_h,
        curve,
    })
}

fn curve_point(n_selected: usize, eps: &[f64], partition: Partition) -> Result<CurvePoint> {
    let b = compute_buffers(eps, partition)?;
    let ol = b.eps_ol.iter().copied().fold(0.0, f64::max);
    Ok(CurvePoint { n_selected, d_h: b.eps_cl.max(ol).max(b.eps_u), eps_cl: b.eps_cl, eps_ol: ol, eps_u: b.eps_u })
}

/// Writes the error-versus-size curve as CSV.
pub fn write_curve_csv(curve: &[CurvePoint], path: &std::path::Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for p in curve {
        wtr.serialize(p).map_err(|e| Error::Format(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}
