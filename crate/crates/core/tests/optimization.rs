mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::binding_instance;
use scenario_truncation::config::RunConfig;
use scenario_truncation::optimization::{
    assemble_scenario_problem, assemble_truncated_problem, kappa, solve, AssemblyOptions, ClarabelBackend,
    ControllerPolicy, NormChoice, PolicyStatus,
};
use scenario_truncation::truncation::Buffers;
use scenario_truncation::pipeline;

fn causal(d: scenario_truncation::system::Dims, mut f: impl FnMut(usize, usize) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(d.input_len(), d.disturbance_len(), |r, c| if r / d.nu > c / d.nw { f(r, c) } else { 0.0 })
}

fn buffers(eps_cl: f64, eps_u: f64, ol: f64, len: usize) -> Buffers {
    Buffers { eps_cl, eps_ol: vec![ol; len], eps_u }
}

#[test]
fn demo_scenario_program_has_one_row_block_per_scenario() {
    let run = RunConfig::demo().resolve().unwrap();
    let set = pipeline::generate(&run).unwrap();
    let prob = assemble_scenario_problem(&run.stacked, run.constraints(), run.cost(), set.matrix(), &run.x0).unwrap();
    let d = run.stacked.dims;
    assert_eq!(prob.layout.gain.len(), 80);
    assert_eq!(prob.layout.v.len(), 10);
    assert_eq!(prob.scenario_rows, 5564 * d.horizon * (5 + 4));
    assert!(prob.layout.zeta.is_empty());
}

#[test]
fn unreachable_start_is_infeasible() {
    let mut inst = binding_instance(3, 3, 50);
    inst.x0 = DVector::from_vec(vec![25.0, 0.0]);
    let sel = inst.set.select(&[0, 1]).unwrap();
    let prob = assemble_truncated_problem(&inst.stacked, &inst.constraints, &inst.cost, &sel, &buffers(0.0, 0.0, 0.0, 6), &inst.x0, &AssemblyOptions::default()).unwrap();
    let pol = solve(&prob, &ClarabelBackend::default()).unwrap();
    assert_eq!(pol.solver_status, PolicyStatus::Infeasible);
    assert!(pol.require_optimal().is_err());
}

#[test]
fn solved_gains_are_causal_and_bounded_by_zeta() {
    let inst = binding_instance(5, 3, 60);
    let d = inst.stacked.dims;
    let sel = inst.set.select(&[0, 7, 19, 33]).unwrap();
    for norm in [NormChoice::One, NormChoice::Two] {
        let opts = AssemblyOptions { norm, ..Default::default() };
        let prob = assemble_truncated_problem(&inst.stacked, &inst.constraints, &inst.cost, &sel, &buffers(0.05, 0.02, 0.05, 6), &inst.x0, &opts).unwrap();
        let pol = solve(&prob, &ClarabelBackend::default()).unwrap();
        assert!(pol.is_optimal(), "{norm:?}: {:?}", pol.solver_status);
        for r in 0..d.input_len() {
            for c in 0..d.disturbance_len() {
                if r / d.nu <= c / d.nw {
                    assert_eq!(pol.k[(r, c)], 0.0);
                }
            }
        }
        assert!(pol.k.amax() > 1e-6, "{norm:?}: feedback unused");
        for t in 1..=d.horizon {
            let kt = kappa(&pol.k, d, t).unwrap();
            let n = match norm {
                NormChoice::One => kt.abs().sum(),
                NormChoice::Two => kt.norm(),
            };
            assert!(pol.zeta[t - 1] >= n - 1e-6, "{norm:?} t={t}: zeta {} < {n}", pol.zeta[t - 1]);
            assert!(pol.zeta[t - 1] >= -1e-9);
        }
        assert!(prob.max_violation(&prob.point_from_policy(&pol)) <= 1e-6);
    }
}

#[test]
fn single_step_horizon_has_no_gain() {
    let inst = binding_instance(1, 1, 20);
    let sel = inst.set.select(&[0, 1, 2]).unwrap();
    let prob = assemble_truncated_problem(&inst.stacked, &inst.constraints, &inst.cost, &sel, &buffers(0.1, 0.1, 0.0, 2), &inst.x0, &AssemblyOptions::default()).unwrap();
    assert!(prob.layout.gain.is_empty());
    let pol = solve(&prob, &ClarabelBackend::default()).unwrap();
    assert!(pol.is_optimal());
    assert_eq!(pol.k.shape(), (1, 2));
    assert_eq!(pol.k.amax(), 0.0);
}

#[test]
fn gain_hull_restricts_the_gain() {
    let inst = binding_instance(2, 3, 40);
    let d = inst.stacked.dims;
    let sel = inst.set.select(&[0, 3, 9]).unwrap();
    let buf = buffers(0.02, 0.01, 0.02, 6);
    let k1 = causal(d, |r, c| 0.1 * (r + c) as f64 / 4.0);
    let k2 = causal(d, |r, c| -0.2 + 0.05 * (r * c) as f64);

    // one vertex pins K
    let opts = AssemblyOptions { gain_hull: Some(vec![k1.clone()]), ..Default::default() };
    let prob = assemble_truncated_problem(&inst.stacked, &inst.constraints, &inst.cost, &sel, &buf, &inst.x0, &opts).unwrap();
    let pol = solve(&prob, &ClarabelBackend::default()).unwrap();
    assert!(pol.is_optimal());
    assert!((&pol.k - &k1).amax() < 1e-6);

    // two vertices: K lies on the segment between them
    let opts = AssemblyOptions { gain_hull: Some(vec![k1.clone(), k2.clone()]), ..Default::default() };
    let prob = assemble_truncated_problem(&inst.stacked, &inst.constraints, &inst.cost, &sel, &buf, &inst.x0, &opts).unwrap();
    let pol = solve(&prob, &ClarabelBackend::default()).unwrap();
    assert!(pol.is_optimal());
    let diff = &k2 - &k1;
    let lam = (&pol.k - &k1).dot(&diff) / diff.norm_squared();
    assert!((-1e-6..=1.0 + 1e-6).contains(&lam));
    assert!((&pol.k - (&k1 + &diff * lam)).amax() < 1e-6);
}

// Raising any buffer only removes feasible points.
#[test]
fn larger_buffers_shrink_the_feasible_set() {
    let inst = binding_instance(4, 3, 40);
    let d = inst.stacked.dims;
    let sel = inst.set.select(&[1, 2, 5, 8]).unwrap();
    let assemble = |b: &Buffers| {
        assemble_truncated_problem(&inst.stacked, &inst.constraints, &inst.cost, &sel, b, &inst.x0, &AssemblyOptions::default()).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut witnessed = 0;
    for _ in 0..10 {
        let small = buffers(rng.random_range(0.0..0.05), rng.random_range(0.0..0.05), rng.random_range(0.0..0.05), 6);
        let large = Buffers {
            eps_cl: small.eps_cl + rng.random_range(0.0..0.1),
            eps_u: small.eps_u + rng.random_range(0.0..0.1),
            eps_ol: small.eps_ol.iter().map(|e| e + rng.random_range(0.0..0.1)).collect(),
        };
        let (ps, pl) = (assemble(&small), assemble(&large));
        let sol = solve(&pl, &ClarabelBackend::default()).unwrap();
        if sol.is_optimal() {
            assert!(ps.max_violation(&ps.point_from_policy(&sol)) <= 1e-6);
        }
        for _ in 0..200 {
            let k = causal(d, |_, _| rng.random_range(-0.3..0.3));
            let v = DVector::from_fn(d.input_len(), |_, _| rng.random_range(-0.6..0.6));
            let zeta = DVector::from_fn(d.horizon, |t, _| kappa(&k, d, t + 1).unwrap().abs().sum() + rng.random_range(0.0..0.2));
            let pol = ControllerPolicy { k, v, zeta, objective_value: 0.0, solver_status: PolicyStatus::Optimal };
            if pl.is_feasible(&pl.point_from_policy(&pol), 1e-9) {
                witnessed += 1;
                assert!(ps.is_feasible(&ps.point_from_policy(&pol), 1e-9));
            }
        }
    }
    assert!(witnessed > 0, "no random point was feasible for the larger buffers");
}
