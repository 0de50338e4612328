//! Offline stages (sample, map, truncate, buffer) and online stages
//! (assemble, solve, validate) wired to files in an output directory.
//!
//! Every stage can run on its own from the artifacts of the previous one:
//!
//! | stage      | reads                               | writes                                 |
//! |------------|-------------------------------------|----------------------------------------|
//! | generate   | config                              | `scenarios.bin`                        |
//! | truncate   | `scenarios.bin`                     | `truncation.json`, `error_curve.csv`   |
//! | solve      | `scenarios.bin`, `truncation.json`  | `policy.json`                          |
//! | validate   | `scenarios.bin`, `policy.json`      | `validation.json`, `validation.csv`, trajectory CSVs |

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ResolvedRun, SampleCount};
use crate::error::{Error, Result};
use crate::optimization::{
    apply_policy, assemble_truncated_problem, solve, AssemblyOptions, ClarabelBackend, ControllerPolicy,
};
use crate::scenarios::ScenarioSet;
use crate::truncation::{
    build_truncation_mapping, compute_buffers, epsilon_vector, greedy_truncate, map_scenarios, write_curve_csv,
    Buffers, PointCloud, StopRule, TruncationResult,
};
use crate::validation::{deterministic_containment_check, monte_carlo_validate, ContainmentReport, ValidationReport};

pub const SCENARIO_FILE: &str = "scenarios.bin";
pub const TRUNCATION_FILE: &str = "truncation.json";
pub const CURVE_FILE: &str = "error_curve.csv";
pub const POLICY_FILE: &str = "policy.json";
pub const VALIDATION_FILE: &str = "validation.json";
pub const RATES_FILE: &str = "validation.csv";
pub const NOMINAL_FILE: &str = "nominal_trajectory.csv";
pub const ENVELOPE_FILE: &str = "envelopes.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Embedded in every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub design_seed: u64,
    pub validation_seed: u64,
    pub sampler_id: String,
    pub n: usize,
    pub crate_version: String,
}

impl Provenance {
    pub fn of(run: &ResolvedRun) -> Self {
        Self {
            config_hash: run.config_hash.clone(),
            design_seed: run.config.seeds.design,
            validation_seed: run.validation_seed,
            sampler_id: run.sampler.sampler_id().to_string(),
            n: run.n(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationRecord {
    pub provenance: Provenance,
    pub scenario_file_sha256: String,
    pub prune: bool,
    pub stop: StopRule,
    pub result: TruncationResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub provenance: Provenance,
    pub truncation_file_sha256: String,
    pub n_vars: usize,
    pub n_rows: usize,
    pub policy: ControllerPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub provenance: Provenance,
    pub policy_file_sha256: String,
    pub containment: ContainmentReport,
    pub monte_carlo: ValidationReport,
}

/// Headline numbers of a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub n: usize,
    pub n_theta: usize,
    pub sample_count: SampleCount,
    pub nhat: usize,
    pub selected: Vec<usize>,
    pub d_h: f64,
    pub eps_cl: f64,
    pub eps_u: f64,
    pub eps_ol_max: f64,
    pub objective: f64,
    pub status: String,
    pub containment_pass: bool,
    pub max_state_residual: f64,
    pub max_input_residual: f64,
    pub mc_samples: usize,
    pub joint_rate: f64,
    pub joint_upper: f64,
    pub state_rate: f64,
    pub input_rate: f64,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, k: &str, v: String| writeln!(f, "  {k:<24} {v}");
        writeln!(f, "run {}", &self.config_hash[..12])?;
        row(f, "scenarios N", self.n.to_string())?;
        if let SampleCount::Override { bound: Some(b), .. } = self.sample_count {
            row(f, "bound N (bypassed)", b.to_string())?;
        }
        row(f, "n_theta", self.n_theta.to_string())?;
        row(f, "selected N_hat", self.nhat.to_string())?;
        row(f, "d_H", format!("{:.6}", self.d_h))?;
        row(f, "eps_cl", format!("{:.6}", self.eps_cl))?;
        row(f, "eps_u", format!("{:.6}", self.eps_u))?;
        row(f, "max eps_ol", format!("{:.6}", self.eps_ol_max))?;
        row(f, "objective", format!("{:.6}", self.objective))?;
        row(f, "solver status", self.status.clone())?;
        row(
            f,
            "containment",
            format!(
                "{} (state {:+.3e}, input {:+.3e})",
                if self.containment_pass { "pass" } else { "FAIL" },
                self.max_state_residual,
                self.max_input_residual
            ),
        )?;
        row(f, "MC samples", self.mc_samples.to_string())?;
        row(f, "joint violation", format!("{:.5} (Wilson upper {:.5})", self.joint_rate, self.joint_upper))?;
        row(f, "state violation", format!("{:.5}", self.state_rate))?;
        row(f, "input violation", format!("{:.5}", self.input_rate))
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: name, source: Box::new(other) },
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn check_provenance(found: &Provenance, run: &ResolvedRun, what: &Path) -> Result<()> {
    if found.config_hash != run.config_hash {
        return Err(Error::Format(format!("{} was produced by a different config ({})", what.display(), found.config_hash)));
    }
    Ok(())
}

/// Draws the design scenarios.
pub fn generate(run: &ResolvedRun) -> Result<ScenarioSet> {
    let d = run.stacked.dims;
    let w = run.sampler.draw(run.n(), run.config.seeds.design);
    Ok(ScenarioSet::from_matrix(w, d.horizon, d.nw, run.config.seeds.design, run.sampler.sampler_id())?
        .with_risk(run.delta(), run.beta()))
}

/// Checks that a scenario file belongs to `run`.
pub fn check_scenarios(run: &ResolvedRun, set: &ScenarioSet) -> Result<()> {
    let d = run.stacked.dims;
    if set.horizon != d.horizon || set.nw != d.nw || set.len() != run.n() {
        return Err(Error::Format(format!(
            "scenario file holds {} scenarios of horizon {} and n_w {}, config asks for {} of horizon {} and n_w {}",
            set.len(),
            set.horizon,
            set.nw,
            run.n(),
            d.horizon,
            d.nw
        )));
    }
    if set.seed != run.config.seeds.design || set.sampler_id != run.sampler.sampler_id() {
        return Err(Error::Format("scenario file seed or sampler does not match the config".into()));
    }
    Ok(())
}

/// Truncation outcome plus the longer error curve used for plotting.
pub struct Truncation {
    pub result: TruncationResult,
    pub cloud: PointCloud,
}

/// Maps the scenarios, runs the greedy selection and extracts buffers.
///
/// The greedy order does not depend on where it stops, so the error curve is
/// taken from one run of `max(N̂, curve_points)` steps and the selection is
/// its prefix.
pub fn truncate(run: &ResolvedRun, scenarios: &ScenarioSet) -> Result<Truncation> {
    let c = run.constraints();
    let mapping = build_truncation_mapping(&c.fx, &c.fu, &run.stacked, run.config.truncation.prune)?;
    let cloud = map_scenarios(&mapping, scenarios)?;
    let curve_len = run.config.truncation.curve_points.min(cloud.len());
    let result = match run.stop {
        StopRule::MaxPoints(nhat) => {
            let long = greedy_truncate(&cloud, StopRule::MaxPoints(nhat.max(curve_len).max(1)))?;
            prefix_result(&cloud, long, nhat)?
        }
        StopRule::TargetEps(_) => {
            let mut res = greedy_truncate(&cloud, run.stop)?;
            if res.curve.len() < curve_len {
                let long = greedy_truncate(&cloud, StopRule::MaxPoints(curve_len))?;
                res.curve = long.curve;
            }
            res
        }
    };
    Ok(Truncation { result, cloud })
}

fn prefix_result(cloud: &PointCloud, long: TruncationResult, nhat: usize) -> Result<TruncationResult> {
    let keep = nhat.min(long.selected.len());
    let selected = long.selected[..keep].to_vec();
    let epsilon: Vec<f64> = epsilon_vector(cloud, &selected)?.iter().copied().collect();
    let b = compute_buffers(&epsilon, cloud.partition)?;
    let d_h = epsilon.iter().copied().fold(0.0, f64::max);
    Ok(TruncationResult {
        selected,
        epsilon,
        partition: cloud.partition,
        eps_cl: b.eps_cl,
        eps_ol: b.eps_ol,
        eps_u: b.eps_u,
        d_h,
        curve: long.curve,
    })
}

/// Assembles and solves the buffered program on the selected scenarios.
pub fn solve_policy(
    run: &ResolvedRun,
    scenarios: &ScenarioSet,
    selected: &[usize],
    buffers: &Buffers,
) -> Result<(ControllerPolicy, usize, usize)> {
    let w_hat = scenarios.select(selected)?;
    let opts = AssemblyOptions { norm: run.config.solver.norm, ..Default::default() };
    let problem = assemble_truncated_problem(&run.stacked, run.constraints(), run.cost(), &w_hat, buffers, &run.x0, &opts)?;
    let backend = ClarabelBackend { tolerance: run.config.solver.tolerance, ..Default::default() };
    let policy = solve(&problem, &backend)?;
    Ok((policy, problem.n_vars(), problem.n_rows()))
}

/// Containment over the design set and Monte Carlo rates on fresh draws.
pub fn validate(run: &ResolvedRun, scenarios: &ScenarioSet, policy: &ControllerPolicy) -> Result<(ContainmentReport, ValidationReport)> {
    policy.require_optimal()?;
    let tol = run.config.validation.tolerance;
    let containment = deterministic_containment_check(policy, &run.stacked, run.constraints(), &run.x0, scenarios.matrix(), tol)?;
    let mc = monte_carlo_validate(
        policy,
        &run.stacked,
        run.constraints(),
        &run.x0,
        &run.sampler,
        run.config.validation.samples,
        run.validation_seed,
        tol,
        run.delta(),
    )?;
    Ok((containment, mc))
}

fn write_config(run: &ResolvedRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), run.config.to_toml_string()?)?;
    Ok(())
}

pub fn stage_generate(run: &ResolvedRun, dir: &Path) -> Result<ScenarioSet> {
    stage("generate", (|| {
        write_config(run, dir)?;
        let set = generate(run)?;
        set.save(&dir.join(SCENARIO_FILE))?;
        Ok(set)
    })())
}

pub fn load_scenarios(run: &ResolvedRun, dir: &Path) -> Result<ScenarioSet> {
    let set = ScenarioSet::load(&dir.join(SCENARIO_FILE))?;
    check_scenarios(run, &set)?;
    Ok(set)
}

pub fn stage_truncate(run: &ResolvedRun, dir: &Path) -> Result<TruncationRecord> {
    stage("truncate", (|| {
        let set = load_scenarios(run, dir)?;
        let t = truncate(run, &set)?;
        write_curve_csv(&t.result.curve, &dir.join(CURVE_FILE))?;
        let record = TruncationRecord {
            provenance: Provenance::of(run),
            scenario_file_sha256: sha256_file(&dir.join(SCENARIO_FILE))?,
            prune: run.config.truncation.prune,
            stop: run.stop,
            result: t.result,
        };
        write_json(&dir.join(TRUNCATION_FILE), &record)?;
        Ok(record)
    })())
}

pub fn stage_solve(run: &ResolvedRun, dir: &Path) -> Result<PolicyRecord> {
    stage("solve", (|| {
        let set = load_scenarios(run, dir)?;
        let path = dir.join(TRUNCATION_FILE);
        let trunc: TruncationRecord = read_json(&path)?;
        check_provenance(&trunc.provenance, run, &path)?;
        let (policy, n_vars, n_rows) = solve_policy(run, &set, &trunc.result.selected, &trunc.result.buffers())?;
        let record = PolicyRecord {
            provenance: Provenance::of(run),
            truncation_file_sha256: sha256_file(&path)?,
            n_vars,
            n_rows,
            policy,
        };
        write_json(&dir.join(POLICY_FILE), &record)?;
        Ok(record)
    })())
}

pub fn stage_validate(run: &ResolvedRun, dir: &Path) -> Result<ValidationRecord> {
    stage("validate", (|| {
        let set = load_scenarios(run, dir)?;
        let path = dir.join(POLICY_FILE);
        let pol: PolicyRecord = read_json(&path)?;
        check_provenance(&pol.provenance, run, &path)?;
        let (containment, monte_carlo) = validate(run, &set, &pol.policy)?;
        monte_carlo.write_csv(&dir.join(RATES_FILE))?;
        let selected = match read_json::<TruncationRecord>(&dir.join(TRUNCATION_FILE)) {
            Ok(t) => t.result.selected,
            Err(_) => Vec::new(),
        };
        write_trajectories(run, &set, &selected, &pol.policy, dir)?;
        let record = ValidationRecord {
            provenance: Provenance::of(run),
            policy_file_sha256: sha256_file(&path)?,
            containment,
            monte_carlo,
        };
        write_json(&dir.join(VALIDATION_FILE), &record)?;
        Ok(record)
    })())
}

/// Runs every stage, writing artifacts under `dir`. Artifacts from stages
/// that completed before a failure are left in place.
pub fn run_pipeline(run: &ResolvedRun, dir: &Path) -> Result<RunSummary> {
    stage_generate(run, dir)?;
    let trunc = stage_truncate(run, dir)?;
    let pol = stage_solve(run, dir)?;
    if !pol.policy.is_optimal() {
        return Err(Error::Stage {
            stage: "solve",
            source: Box::new(Error::Backend(format!("solver finished with status {:?}", pol.policy.solver_status))),
        });
    }
    let val = stage_validate(run, dir)?;
    Ok(summarize(run, &trunc, &pol, &val))
}

pub fn summarize(run: &ResolvedRun, trunc: &TruncationRecord, pol: &PolicyRecord, val: &ValidationRecord) -> RunSummary {
    let r = &trunc.result;
    let mc = &val.monte_carlo;
    RunSummary {
        config_hash: run.config_hash.clone(),
        n: run.n(),
        n_theta: run.n_theta,
        sample_count: run.count,
        nhat: r.selected.len(),
        selected: r.selected.clone(),
        d_h: r.d_h,
        eps_cl: r.eps_cl,
        eps_u: r.eps_u,
        eps_ol_max: r.eps_ol.iter().copied().fold(0.0, f64::max),
        objective: pol.policy.objective_value,
        status: format!("{:?}", pol.policy.solver_status),
        containment_pass: val.containment.all_satisfied(),
        max_state_residual: val.containment.max_state_excess,
        max_input_residual: val.containment.max_input_excess,
        mc_samples: mc.samples,
        joint_rate: mc.joint.rate,
        joint_upper: mc.joint.upper,
        state_rate: mc.state.rate,
        input_rate: mc.input.rate,
    }
}

/// Nominal rollout (`W = 0`) and per-step planar hulls of the closed-loop
/// states for the full and the truncated scenario sets.
pub fn write_trajectories(
    run: &ResolvedRun,
    scenarios: &ScenarioSet,
    selected: &[usize],
    policy: &ControllerPolicy,
    dir: &Path,
) -> Result<()> {
    let d = run.stacked.dims;
    let err = |e: csv::Error| Error::Format(e.to_string());

    let (u, x) = apply_policy(policy, &run.stacked, &run.x0, &DVector::zeros(d.disturbance_len()))?;
    let mut w = csv::Writer::from_path(dir.join(NOMINAL_FILE)).map_err(err)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..d.nx).map(|i| format!("x{i}")));
    header.extend((0..d.nu).map(|i| format!("u{i}")));
    w.write_record(&header).map_err(err)?;
    for t in 0..=d.horizon {
        let mut rec = vec![t.to_string()];
        let state: Vec<f64> = if t == 0 { run.x0.iter().copied().collect() } else { x.rows((t - 1) * d.nx, d.nx).iter().copied().collect() };
        rec.extend(state.iter().map(|v| v.to_string()));
        if t < d.horizon {
            rec.extend(u.rows(t * d.nu, d.nu).iter().map(|v| v.to_string()));
        } else {
            rec.extend((0..d.nu).map(|_| String::new()));
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush()?;

    let [ia, ib] = run.config.output.plot_states(d.nx);
    let states: Vec<DVector<f64>> = (0..scenarios.len())
        .map(|i| apply_policy(policy, &run.stacked, &run.x0, &scenarios.column(i)).map(|(_, x)| x))
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(dir.join(ENVELOPE_FILE)).map_err(err)?;
    w.write_record(["t", "set", "vertex", "a", "b"]).map_err(err)?;
    for t in 1..=d.horizon {
        let at = |i: usize| (states[i][(t - 1) * d.nx + ia], states[i][(t - 1) * d.nx + ib]);
        for (name, idx) in [("full", (0..scenarios.len()).collect::<Vec<_>>()), ("truncated", selected.to_vec())] {
            let pts: Vec<(f64, f64)> = idx.iter().map(|&i| at(i)).collect();
            for (k, (a, b)) in convex_hull_2d(&pts).into_iter().enumerate() {
                w.write_record([t.to_string(), name.to_string(), k.to_string(), a.to_string(), b.to_string()]).map_err(err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Counter-clockwise hull vertices (monotone chain), collinear points dropped.
pub fn convex_hull_2d(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Default output directory of a run, overridable from the command line.
pub fn output_dir(run: &ResolvedRun, over: Option<&Path>) -> PathBuf {
    over.map(Path::to_path_buf).unwrap_or_else(|| run.config.output.dir.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn hull_of_square_with_interior() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (0.5, 0.5), (1.0, 1.0), (0.0, 1.0), (0.5, 0.0)];
        let h = convex_hull_2d(&pts);
        assert_eq!(h, vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        assert_eq!(convex_hull_2d(&[(1.0, 2.0)]), vec![(1.0, 2.0)]);
    }

    #[test]
    fn zero_disturbance_pipeline_has_no_violations() {
        let mut cfg = RunConfig::demo();
        cfg.sampler = crate::scenarios::SamplerSpec::GaussianDiagonal { variance: vec![0.0; 4] };
        cfg.samples.n = Some(40);
        cfg.truncation.nhat = Some(3);
        cfg.truncation.curve_points = 5;
        cfg.validation.samples = 200;
        let run = cfg.resolve().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s = run_pipeline(&run, dir.path()).unwrap();
        assert!(s.containment_pass);
        assert_eq!(s.joint_rate, 0.0);
        assert_eq!(s.d_h, 0.0);
        for f in [SCENARIO_FILE, TRUNCATION_FILE, CURVE_FILE, POLICY_FILE, VALIDATION_FILE, RATES_FILE, NOMINAL_FILE, ENVELOPE_FILE, CONFIG_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let text = fs::read_to_string(dir.path().join(POLICY_FILE)).unwrap();
        assert!(text.contains(&run.config_hash));
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let run = RunConfig::demo().resolve().unwrap();
        let dir = tempfile::tempdir().unwrap();
        match stage_truncate(&run, dir.path()) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "truncate"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
