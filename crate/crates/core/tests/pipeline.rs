use std::fs;

use scenario_truncation::config::RunConfig;
use scenario_truncation::pipeline::{self, *};
use scenario_truncation::Error;

fn quick_demo() -> RunConfig {
    let mut cfg = RunConfig::demo();
    cfg.samples.n = Some(800);
    cfg.truncation.nhat = Some(6);
    cfg.validation.samples = 500;
    cfg
}

#[test]
fn staged_run_matches_in_memory_run() {
    let run = quick_demo().resolve().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = run_pipeline(&run, dir.path()).unwrap();

    let set = pipeline::generate(&run).unwrap();
    let t = pipeline::truncate(&run, &set).unwrap().result;
    let (pol, _, _) = pipeline::solve_policy(&run, &set, &t.selected, &t.buffers()).unwrap();
    assert_eq!(summary.selected, t.selected);
    assert_eq!(summary.eps_cl, t.eps_cl);
    assert_eq!(summary.objective, pol.objective_value);

    for f in [SCENARIO_FILE, TRUNCATION_FILE, CURVE_FILE, POLICY_FILE, VALIDATION_FILE, RATES_FILE, NOMINAL_FILE, ENVELOPE_FILE, CONFIG_FILE] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let curve = fs::read_to_string(dir.path().join(CURVE_FILE)).unwrap();
    assert_eq!(curve.lines().count(), 1 + run.config.truncation.curve_points);
}

#[test]
fn repeated_runs_write_identical_artifacts() {
    let run = quick_demo().resolve().unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&run, a.path()).unwrap();
    run_pipeline(&run, b.path()).unwrap();
    for f in [SCENARIO_FILE, TRUNCATION_FILE, POLICY_FILE, VALIDATION_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn stages_refuse_artifacts_from_another_config() {
    let run = quick_demo().resolve().unwrap();
    let dir = tempfile::tempdir().unwrap();
    stage_generate(&run, dir.path()).unwrap();
    stage_truncate(&run, dir.path()).unwrap();

    let mut other = quick_demo();
    other.truncation.nhat = Some(7);
    let other = other.resolve().unwrap();
    match stage_solve(&other, dir.path()) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "solve"),
        r => panic!("expected a solve-stage error, got {:?}", r.map(|_| ())),
    }
}

#[test]
fn missing_inputs_name_the_stage() {
    let run = quick_demo().resolve().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = stage_truncate(&run, dir.path()).err().expect("no scenario file");
    assert!(matches!(err, Error::Stage { stage: "truncate", .. }), "{err}");
    let err = stage_validate(&run, dir.path()).err().expect("no policy file");
    assert!(matches!(err, Error::Stage { stage: "validate", .. }), "{err}");
}
