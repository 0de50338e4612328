//! Run configuration: one TOML file carries the plant, constraints, sampler,
//! sample budget, truncation rule, cost, seeds and output settings.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::optimization::{ConstraintSpec, CostSpec, ExpectationMode, NormChoice};
use crate::scenarios::{count_decision_vars, required_sample_count, Sampler, SamplerSpec};
use crate::serde_matrix;
use crate::system::{LinearSystem, StackedSystem};
use crate::truncation::StopRule;
use crate::validation::VALIDATION_SEED_OFFSET;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(with = "serde_matrix::rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_matrix::rows")]
    pub bu: DMatrix<f64>,
    #[serde(with = "serde_matrix::rows")]
    pub bw: DMatrix<f64>,
    pub horizon: usize,
}

/// Either `delta` and `beta` (sample count from the bound), or an explicit
/// `n`. With all three, `n` wins and the bound is reported as bypassed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

/// Exactly one of `nhat` and `target_eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nhat: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_eps: Option<f64>,
    #[serde(default = "yes")]
    pub prune: bool,
    /// Length of the exported error curve.
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub design: u64,
    /// Defaults to `design + VALIDATION_SEED_OFFSET`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub norm: NormChoice,
    #[serde(default = "default_solver_tol")]
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { norm: NormChoice::One, tolerance: default_solver_tol() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    #[serde(default = "default_mc_samples")]
    pub samples: usize,
    /// Residual allowed in the containment check and in Monte Carlo counting.
    #[serde(default = "default_residual_tol")]
    pub tolerance: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { samples: default_mc_samples(), tolerance: default_residual_tol() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// State coordinates used for the planar envelope plots; the first two
    /// states when absent (the first one twice for scalar systems).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot_states: Option<[usize; 2]>,
}

impl OutputConfig {
    pub fn plot_states(&self, nx: usize) -> [usize; 2] {
        self.plot_states.unwrap_or([0, nx.min(2) - 1])
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out_dir(), plot_states: None }
    }
}

fn yes() -> bool {
    true
}
fn default_curve_points() -> usize {
    50
}
fn default_solver_tol() -> f64 {
    1e-8
}
fn default_mc_samples() -> usize {
    10_000
}
fn default_residual_tol() -> f64 {
    1e-6
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub constraints: ConstraintSpec,
    pub sampler: SamplerSpec,
    pub samples: SampleConfig,
    pub truncation: TruncationConfig,
    pub cost: CostSpec,
    pub x0: Vec<f64>,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Where the scenario count came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum SampleCount {
    Bound { n: usize },
    /// Explicit `n`; `bound` is what `delta`/`beta` would have required.
    Override { n: usize, bound: Option<usize> },
}

impl SampleCount {
    pub fn n(&self) -> usize {
        match *self {
            SampleCount::Bound { n } | SampleCount::Override { n, .. } => n,
        }
    }
}

/// A validated configuration with its derived objects.
pub struct ResolvedRun {
    pub config: RunConfig,
    pub system: LinearSystem,
    pub stacked: StackedSystem,
    pub sampler: Sampler,
    pub x0: DVector<f64>,
    pub n_theta: usize,
    pub count: SampleCount,
    pub stop: StopRule,
    pub validation_seed: u64,
    pub config_hash: String,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config { field: toml_field(&e), message: e.message().to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml_string()?.as_bytes())))
    }

    pub fn n_theta(&self) -> Result<usize> {
        let sys = self.build_system()?;
        Ok(count_decision_vars(sys.dims(), false))
    }

    /// Scenario count from `samples`, checking which fields are present.
    pub fn sample_count(&self) -> Result<SampleCount> {
        let s = &self.samples;
        let n_theta = self.n_theta()?;
        let bound = match (s.delta, s.beta) {
            (Some(d), Some(b)) => {
                check_unit("samples.delta", d)?;
                check_unit("samples.beta", b)?;
                Some(required_sample_count(d, b, n_theta)?)
            }
            (Some(_), None) if s.n.is_none() => return config_err("samples.beta", "missing; required with samples.delta"),
            (None, Some(_)) if s.n.is_none() => return config_err("samples.delta", "missing; required with samples.beta"),
            (None, None) if s.n.is_none() => return config_err("samples", "give either delta and beta, or n"),
            _ => None,
        };
        match s.n {
            Some(0) => config_err("samples.n", "must be at least 1"),
            Some(n) => Ok(SampleCount::Override { n, bound }),
            None => Ok(SampleCount::Bound { n: bound.expect("bound computed above") }),
        }
    }

    fn build_system(&self) -> Result<LinearSystem> {
        let s = &self.system;
        if s.horizon == 0 {
            return config_err("system.horizon", "must be at least 1");
        }
        LinearSystem::new(s.a.clone(), s.bu.clone(), s.bw.clone(), s.horizon)
            .map_err(|e| Error::Config { field: "system".into(), message: e.to_string() })
    }

    pub fn stop_rule(&self) -> Result<StopRule> {
        let t = &self.truncation;
        match (t.nhat, t.target_eps) {
            (Some(_), Some(_)) => config_err("truncation", "give exactly one of nhat and target_eps"),
            (None, None) => config_err("truncation", "give one of nhat and target_eps"),
            (Some(0), None) => config_err("truncation.nhat", "must be at least 1"),
            (Some(n), None) => Ok(StopRule::MaxPoints(n)),
            (None, Some(e)) if !(e.is_finite() && e >= 0.0) => {
                config_err("truncation.target_eps", format!("must be finite and nonnegative, got {e}"))
            }
            (None, Some(e)) => Ok(StopRule::TargetEps(e)),
        }
    }

    /// Validates every section and builds the derived objects.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        let system = self.build_system()?;
        let dims = system.dims();
        let wrap = |field: &str| {
            let field = field.to_string();
            move |e: Error| match e {
                Error::Config { .. } => e,
                other => Error::Config { field: field.clone(), message: other.to_string() },
            }
        };
        self.constraints.validate().map_err(wrap("constraints"))?;
        self.constraints.check_dims(dims).map_err(wrap("constraints"))?;
        self.cost.validate(dims).map_err(wrap("cost"))?;
        if self.x0.len() != dims.nx {
            return config_err("x0", format!("has length {}, expected n_x = {}", self.x0.len(), dims.nx));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return config_err("x0", "must be finite");
        }
        let sampler = Sampler::new(&self.sampler, dims.horizon, dims.nw).map_err(wrap("sampler"))?;
        let count = self.sample_count()?;
        let stop = self.stop_rule()?;
        if let StopRule::MaxPoints(nhat) = stop {
            if nhat > count.n() {
                return config_err("truncation.nhat", format!("{nhat} exceeds the scenario count {}", count.n()));
            }
        }
        if !(self.solver.tolerance > 0.0 && self.solver.tolerance < 1.0) {
            return config_err("solver.tolerance", "must lie in (0, 1)");
        }
        if self.validation.samples == 0 {
            return config_err("validation.samples", "must be at least 1");
        }
        if !(self.validation.tolerance >= 0.0) {
            return config_err("validation.tolerance", "must be nonnegative");
        }
        if let Some(&i) = self.output.plot_states(dims.nx).iter().find(|&&i| i >= dims.nx) {
            return config_err("output.plot_states", format!("state index {i} out of range for n_x = {}", dims.nx));
        }
        let validation_seed = self.seeds.validation.unwrap_or(self.seeds.design.wrapping_add(VALIDATION_SEED_OFFSET));
        if validation_seed == self.seeds.design {
            return config_err("seeds.validation", "must differ from the design seed");
        }
        Ok(ResolvedRun {
            config: self.clone(),
            stacked: system.stack(),
            system,
            sampler,
            x0: DVector::from_column_slice(&self.x0),
            n_theta: count_decision_vars(dims, false),
            count,
            stop,
            validation_seed,
            config_hash: self.hash()?,
        })
    }

    /// The double-integrator robot demo: planar positions and velocities,
    /// unit sample time, five steps, polytopic position and input sets.
    pub fn demo() -> Self {
        Self::from_toml_str(DEMO_CONFIG).expect("embedded demo config parses")
    }
}

fn check_unit(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        config_err(field, format!("{v} must lie in (0, 1)"))
    }
}

/// Best-effort dotted path of the offending key in a TOML parse error.
fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    for marker in ["missing field `", "unknown field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    match e.span() {
        Some(span) => format!("<input bytes {}..{}>", span.start, span.end),
        None => "<input>".into(),
    }
}

/// Demo configuration shipped with the crate.
pub const DEMO_CONFIG: &str = include_str!("demo.toml");

impl ResolvedRun {
    pub fn constraints(&self) -> &ConstraintSpec {
        &self.config.constraints
    }

    pub fn cost(&self) -> &CostSpec {
        &self.config.cost
    }

    pub fn n(&self) -> usize {
        self.count.n()
    }

    pub fn delta(&self) -> Option<f64> {
        self.config.samples.delta
    }

    pub fn beta(&self) -> Option<f64> {
        self.config.samples.beta
    }

    pub fn expectation(&self) -> ExpectationMode {
        self.config.cost.expectation
    }
}
