//! Shared fixtures for the criterion benches in `benches/`.

use std::sync::Arc;

use stochwave::harness::StepRule;
use stochwave::{
    assemble_operators, build_noise_factor, build_stepper, build_uniform_mesh, CoupledPaths,
    CovarianceSpec, FemOperators, NoiseFactor, RationalMethod, State, Stepper,
};

pub fn operators(n_elements: usize) -> Arc<FemOperators> {
    Arc::new(assemble_operators(&build_uniform_mesh(n_elements).expect("mesh")).expect("operators"))
}

pub fn stepper(method: RationalMethod, n_elements: usize) -> Stepper {
    build_stepper(method, operators(n_elements), 1.0 / n_elements as f64).expect("stepper")
}

pub fn noise_factor(spec: CovarianceSpec, n_elements: usize) -> NoiseFactor {
    let ops = operators(n_elements);
    build_noise_factor(ops.mesh(), &ops, spec).expect("noise factor")
}

/// Levels `2^-1 .. 2^-coarsest` coupled to a `2^-reference` reference with `dt = h`.
pub fn coupled_paths(coarsest: i32, reference: i32) -> CoupledPaths {
    let level = |k: i32| StepRule::DtEqualsH.level(2f64.powi(-k));
    let levels: Vec<_> = (1..=coarsest).map(level).collect();
    let zero = |ops: &FemOperators| Ok(State::zeros(ops.dof()));
    CoupledPaths::new(
        RationalMethod::CrankNicolson,
        level(reference),
        &levels,
        1.0,
        None,
        zero,
    )
    .expect("paths")
}
