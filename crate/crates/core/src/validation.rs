//! Checks a solved policy against scenarios: the design set (deterministic
//! containment) and fresh draws (Monte Carlo violation rates).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::optimization::{apply_policy, ConstraintSpec, ControllerPolicy};
use crate::scenarios::Sampler;
use crate::system::StackedSystem;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

/// Offset added to the design seed for validation draws, so the two streams
/// never coincide.
pub const VALIDATION_SEED_OFFSET: u64 = 1_000_003;

/// Wilson score interval for `k` successes out of `n`.
///
/// ```
/// use scenario_truncation::validation::{wilson_interval, Z_95};
/// let (lo, hi) = wilson_interval(0, 100, Z_95);
/// assert_eq!(lo, 0.0);
/// assert!(hi > 0.03 && hi < 0.04);
/// ```
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lower = if k == 0 { 0.0 } else { (centre - half).max(0.0) };
    let upper = if p == 1.0 { 1.0 } else { (centre + half).min(1.0) };
    (lower, upper)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub violations: usize,
    pub trials: usize,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl RateEstimate {
    pub fn new(violations: usize, trials: usize) -> Self {
        let (lower, upper) = wilson_interval(violations, trials, Z_95);
        let rate = if trials == 0 { 0.0 } else { violations as f64 / trials as f64 };
        Self { violations, trials, rate, lower, upper }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeRates {
    /// 1-based step; state `x_t` and input `u_{t-1}`.
    pub t: usize,
    pub state: RateEstimate,
    pub input: RateEstimate,
    pub any: RateEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub seed: u64,
    pub sampler_id: String,
    pub tolerance: f64,
    /// Some constraint is violated somewhere over the horizon.
    pub joint: RateEstimate,
    pub state: RateEstimate,
    pub input: RateEstimate,
    pub per_time: Vec<TimeRates>,
    pub max_state_excess: f64,
    pub max_input_excess: f64,
    pub delta: Option<f64>,
    /// Joint rate at most `delta`.
    pub within_delta: Option<bool>,
}

impl ValidationReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["t", "kind", "violations", "trials", "rate", "lower", "upper"]).map_err(err)?;
        let mut put = |t: String, kind: &str, r: &RateEstimate| {
            w.write_record([
                t,
                kind.to_string(),
                r.violations.to_string(),
                r.trials.to_string(),
                r.rate.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
            ])
        };
        put("all".into(), "joint", &self.joint).map_err(err)?;
        put("all".into(), "state", &self.state).map_err(err)?;
        put("all".into(), "input", &self.input).map_err(err)?;
        for row in &self.per_time {
            put(row.t.to_string(), "state", &row.state).map_err(err)?;
            put(row.t.to_string(), "input", &row.input).map_err(err)?;
            put(row.t.to_string(), "any", &row.any).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-step worst constraint excess of one rollout (positive means violated).
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutExcess {
    pub state: Vec<f64>,
    pub input: Vec<f64>,
}

struct Checker<'a> {
    policy: &'a ControllerPolicy,
    stacked: &'a StackedSystem,
    fx: &'a DMatrix<f64>,
    fu: &'a DMatrix<f64>,
    x0: &'a DVector<f64>,
}

impl<'a> Checker<'a> {
    fn new(
        policy: &'a ControllerPolicy,
        stacked: &'a StackedSystem,
        constraints: &'a ConstraintSpec,
        x0: &'a DVector<f64>,
    ) -> Result<Self> {
        constraints.validate()?;
        constraints.check_dims(stacked.dims)?;
        if x0.len() != stacked.dims.nx {
            return dim_err(format!("x0 has length {}, expected {}", x0.len(), stacked.dims.nx));
        }
        Ok(Self { policy, stacked, fx: &constraints.fx, fu: &constraints.fu, x0 })
    }

    fn excess(&self, w: &DVector<f64>) -> Result<RolloutExcess> {
        let d = self.stacked.dims;
        let (u, x) = apply_policy(self.policy, self.stacked, self.x0, w)?;
        let worst = |f: &DMatrix<f64>, v: DVector<f64>| (f * v).iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s - 1.0));
        let state = (0..d.horizon).map(|t| worst(self.fx, x.rows(t * d.nx, d.nx).into_owned())).collect();
        let input = (0..d.horizon).map(|t| worst(self.fu, u.rows(t * d.nu, d.nu).into_owned())).collect();
        Ok(RolloutExcess { state, input })
    }
}

/// Constraint excess of every scenario column under `policy`.
pub fn rollout_excess(
    policy: &ControllerPolicy,
    stacked: &StackedSystem,
    constraints: &ConstraintSpec,
    x0: &DVector<f64>,
    scenarios: &DMatrix<f64>,
) -> Result<Vec<RolloutExcess>> {
    let checker = Checker::new(policy, stacked, constraints, x0)?;
    (0..scenarios.ncols()).into_par_iter().map(|i| checker.excess(&scenarios.column(i).into_owned())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub checked: usize,
    pub tolerance: f64,
    /// Indices of scenarios with some excess above `tolerance`.
    pub violating: Vec<usize>,
    pub max_state_excess: f64,
    pub max_input_excess: f64,
}

impl ContainmentReport {
    pub fn all_satisfied(&self) -> bool {
        self.violating.is_empty()
    }
}

/// Checks every design scenario against the original (unbuffered) constraints.
pub fn deterministic_containment_check(
    policy: &ControllerPolicy,
    stacked: &StackedSystem,
    constraints: &ConstraintSpec,
    x0: &DVector<f64>,
    scenarios: &DMatrix<f64>,
    tolerance: f64,
) -> Result<ContainmentReport> {
    let ex = rollout_excess(policy, stacked, constraints, x0, scenarios)?;
    let max = |v: &[f64]| v.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let violating = ex
        .iter()
        .enumerate()
        .filter(|(_, e)| max(&e.state) > tolerance || max(&e.input) > tolerance)
        .map(|(i, _)| i)
        .collect();
    Ok(ContainmentReport {
        checked: ex.len(),
        tolerance,
        violating,
        max_state_excess: ex.iter().map(|e| max(&e.state)).fold(f64::NEG_INFINITY, f64::max),
        max_input_excess: ex.iter().map(|e| max(&e.input)).fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Default, Clone)]
struct Tally {
    joint: usize,
    state: usize,
    input: usize,
    state_t: Vec<usize>,
    input_t: Vec<usize>,
    any_t: Vec<usize>,
    max_state: f64,
    max_input: f64,
}

impl Tally {
    fn empty(p: usize) -> Self {
        Self {
            state_t: vec![0; p],
            input_t: vec![0; p],
            any_t: vec![0; p],
            max_state: f64::NEG_INFINITY,
            max_input: f64::NEG_INFINITY,
            ..Self::default()
        }
    }

    fn add(mut self, e: &RolloutExcess, tol: f64) -> Self {
        let mut sv = false;
        let mut uv = false;
        for t in 0..e.state.len() {
            let s = e.state[t] > tol;
            let u = e.input[t] > tol;
            self.state_t[t] += s as usize;
            self.input_t[t] += u as usize;
            self.any_t[t] += (s || u) as usize;
            sv |= s;
            uv |= u;
            self.max_state = self.max_state.max(e.state[t]);
            self.max_input = self.max_input.max(e.input[t]);
        }
        self.state += sv as usize;
        self.input += uv as usize;
        self.joint += (sv || uv) as usize;
        self
    }

    fn merge(mut self, o: Self) -> Self {
        self.joint += o.joint;
        self.state += o.state;
        self.input += o.input;
        for t in 0..self.state_t.len() {
            self.state_t[t] += o.state_t[t];
            self.input_t[t] += o.input_t[t];
            self.any_t[t] += o.any_t[t];
        }
        self.max_state = self.max_state.max(o.max_state);
        self.max_input = self.max_input.max(o.max_input);
        self
    }
}

/// Monte Carlo violation rates on `samples` fresh draws keyed by `seed`.
/// Counts are integers and extremes are maxima, so the report does not
/// depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_validate(
    policy: &ControllerPolicy,
    stacked: &StackedSystem,
    constraints: &ConstraintSpec,
    x0: &DVector<f64>,
    sampler: &Sampler,
    samples: usize,
    seed: u64,
    tolerance: f64,
    delta: Option<f64>,
) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(Error::InvalidSampler("validation needs at least one sample".into()));
    }
    if sampler.stacked_len() != stacked.dims.disturbance_len() {
        return dim_err("sampler length does not match the stacked disturbance");
    }
    let checker = Checker::new(policy, stacked, constraints, x0)?;
    let p = stacked.dims.horizon;
    let tally = (0..samples as u64)
        .into_par_iter()
        .map(|i| checker.excess(&sampler.draw_column(seed, i)))
        .try_fold(|| Tally::empty(p), |acc, e| e.map(|e| acc.add(&e, tolerance)))
        .try_reduce(|| Tally::empty(p), |a, b| Ok(a.merge(b)))?;

    let per_time = (0..p)
        .map(|t| TimeRates {
            t: t + 1,
            state: RateEstimate::new(tally.state_t[t], samples),
            input: RateEstimate::new(tally.input_t[t], samples),
            any: RateEstimate::new(tally.any_t[t], samples),
        })
        .collect();
    let joint = RateEstimate::new(tally.joint, samples);
    Ok(ValidationReport {
        samples,
        seed,
        sampler_id: sampler.sampler_id().to_string(),
        tolerance,
        joint,
        state: RateEstimate::new(tally.state, samples),
        input: RateEstimate::new(tally.input, samples),
        per_time,
        max_state_excess: tally.max_state,
        max_input_excess: tally.max_input,
        delta,
        within_delta: delta.map(|d| joint.rate <= d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimization::PolicyStatus;
    use crate::scenarios::SamplerSpec;
    use crate::system::LinearSystem;

    fn setup() -> (StackedSystem, ConstraintSpec, DVector<f64>) {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::identity(1, 1),
            3,
        )
        .unwrap();
        let c = ConstraintSpec::new(DMatrix::from_row_slice(1, 1, &[1.0]), DMatrix::from_row_slice(1, 1, &[1.0])).unwrap();
        (sys.stack(), c, DVector::from_element(1, 0.0))
    }

    #[test]
    fn wilson_matches_closed_form() {
        let (lo, hi) = wilson_interval(10, 100, Z_95);
        // reference values for k = 10, n = 100
        assert!((lo - 0.05522).abs() < 1e-4, "{lo}");
        assert!((hi - 0.17437).abs() < 1e-4, "{hi}");
        let (lo, hi) = wilson_interval(100, 100, Z_95);
        assert!(hi == 1.0 && lo > 0.96);
        assert_eq!(wilson_interval(0, 0, Z_95), (0.0, 1.0));
    }

    #[test]
    fn containment_flags_violations() {
        let (st, c, x0) = setup();
        let policy = ControllerPolicy::open_loop(DVector::zeros(3), st.dims).unwrap();
        // x_t is the running sum of w
        let w = DMatrix::from_column_slice(3, 3, &[0.5, 0.4, 0.0, 0.5, 0.6, 0.0, -2.0, 0.0, 0.0]);
        let rep = deterministic_containment_check(&policy, &st, &c, &x0, &w, 1e-9).unwrap();
        assert_eq!(rep.violating, vec![1]);
        assert!((rep.max_state_excess - 0.1).abs() < 1e-12);
        assert!(rep.max_input_excess < 0.0);
    }

    #[test]
    fn monte_carlo_rate_is_unbiased() {
        // x_1 = w_0 ~ N(0, 1): violation of x_1 <= 1 has probability 1 - Φ(1)
        let one = DMatrix::identity(1, 1);
        let st = LinearSystem::new(one.clone(), one.clone(), one.clone(), 1).unwrap().stack();
        let c = ConstraintSpec::new(one, DMatrix::from_row_slice(1, 1, &[0.0])).unwrap();
        let x0 = DVector::zeros(1);
        let policy = ControllerPolicy::open_loop(DVector::zeros(1), st.dims).unwrap();
        let sampler = Sampler::new(&SamplerSpec::GaussianDiagonal { variance: vec![1.0] }, 1, 1).unwrap();
        let rep = monte_carlo_validate(&policy, &st, &c, &x0, &sampler, 40_000, 11, 0.0, Some(0.2)).unwrap();
        let exact = 0.158_655_253_931_457;
        assert!(rep.joint.lower <= exact && exact <= rep.joint.upper, "{:?}", rep.joint);
        assert_eq!(rep.within_delta, Some(true));
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let (st, c, x0) = setup();
        let policy = ControllerPolicy {
            k: DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, -0.5, 0.0, 0.0, -0.2, -0.5, 0.0]),
            v: DVector::zeros(3),
            zeta: DVector::zeros(3),
            objective_value: 0.0,
            solver_status: PolicyStatus::Optimal,
        };
        let sampler = Sampler::new(&SamplerSpec::GaussianDiagonal { variance: vec![0.3] }, 3, 1).unwrap();
        let a = monte_carlo_validate(&policy, &st, &c, &x0, &sampler, 5000, 3, 0.0, None).unwrap();
        let b = monte_carlo_validate(&policy, &st, &c, &x0, &sampler, 5000, 3, 0.0, None).unwrap();
        assert_eq!(a, b);
        let pt_any: usize = a.per_time.iter().map(|r| r.any.violations).sum();
        assert!(pt_any >= a.joint.violations);
    }
}
