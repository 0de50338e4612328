#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenario_truncation::optimization::{ConstraintSpec, CostSpec, ExpectationMode};
use scenario_truncation::scenarios::ScenarioSet;
use scenario_truncation::system::{LinearSystem, StackedSystem};

/// Double integrator with a box on position, uniform scenarios and a
/// reference out of reach, so the constraints bind.
pub struct Instance {
    pub stacked: StackedSystem,
    pub constraints: ConstraintSpec,
    pub cost: CostSpec,
    pub set: ScenarioSet,
    pub x0: DVector<f64>,
}

pub fn binding_instance(seed: u64, horizon: usize, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sys = LinearSystem::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::identity(2, 2),
        horizon,
    )
    .unwrap();
    let constraints = ConstraintSpec::new(
        DMatrix::from_row_slice(2, 2, &[rng.random_range(0.5..2.0), 0.0, -rng.random_range(0.5..2.0), 0.0]),
        DMatrix::from_row_slice(2, 1, &[0.3, -0.3]),
    )
    .unwrap();
    let w = DMatrix::from_fn(2 * horizon, n, |_, _| rng.random_range(-0.15..0.15f64));
    let set = ScenarioSet::from_matrix(w, horizon, 2, seed, "uniform-test").unwrap();
    let cost = CostSpec::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.01)
        .with_reference([5.0, 0.0].repeat(horizon))
        .with_expectation(ExpectationMode::ScenarioMean);
    Instance { stacked: sys.stack(), constraints, cost, set, x0: DVector::zeros(2) }
}
