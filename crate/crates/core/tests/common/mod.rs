#![allow(dead_code)]

use chaosflow::bismut::TestFunction;
use chaosflow::coupled::{Components, CoupledSpec};
use chaosflow::derivative_sim::{DirectionSpec, WeightFunction};
use chaosflow::models::ModelSpec;
use chaosflow::noise::TimeGrid;
use chaosflow::particle_sim::InitialLaw;

/// Engine settings on `[0, 1]` with `steps` steps and every component on.
pub fn spec(model: ModelSpec, steps: usize, seed: u64) -> CoupledSpec {
    CoupledSpec {
        model,
        base_grid: TimeGrid::new(1.0, steps).unwrap(),
        refinements: 0,
        init: InitialLaw::default(),
        direction: DirectionSpec::Linear { scale: 1.0 },
        weight: WeightFunction::linear(0.0, 1.0).unwrap(),
        test_function: TestFunction::Tanh,
        k: 2.0,
        reference_size: 512,
        aux_size: 512,
        seed,
        tag: 0,
        initial_shift: 0.0,
        components: Components::all(),
        zeta_orders: vec![2.0, 4.0],
    }
}
