//! Fully discrete approximation of the semilinear stochastic wave equation
//!
//! ```text
//! du = v dt,   dv = (-Λu + F(u)) dt + dW,   on D = (0, 1), u = 0 on ∂D
//! ```
//!
//! driven by additive Q-Wiener noise. Space is discretized with continuous
//! piecewise linear finite elements on uniform meshes, time with a rational
//! approximation `R(Δt A_h)` of the wave group (backward Euler or
//! Crank–Nicolson). On top of the solver sit strong/weak Monte Carlo error
//! estimators, a theoretical rate predictor, and a convergence harness that
//! couples coarse discretizations to a fine reference through a shared
//! Wiener path.
//!
//! Module map:
//!
//! - [`fem`]: meshes, mass/stiffness assembly, projections, nested-grid
//!   prolongation, spectral tools for fractional Sobolev norms.
//! - [`noise`]: covariance models, load-vector noise factors, counter-based
//!   random streams, restriction of noise to coarse grids.
//! - [`scheme`]: rational integrators, Nemytskij drift loads, path drivers.
//! - [`analysis`]: energy, error estimators, rate prediction and fitting,
//!   exact modal oracle for the linear problem.
//! - [`harness`]: Monte Carlo convergence experiments and report output.
//! - [`validation`]: the quick invariant suite behind `stochwave validate`.

pub mod analysis;
pub mod error;
pub mod fem;
pub mod harness;
pub mod linalg;
pub mod noise;
pub mod scheme;
pub mod validation;

mod serde_ext;

pub use analysis::{
    energy, fit_rates, predict_rates, strong_error_estimate, weak_error_estimate, ErrorColumn,
    ErrorNorm, ErrorRow, ErrorTable, Estimate, ModalOracle, ModalState, RateFit, RatePrediction,
    RegularityParams, TestFunction, WeakEstimate,
};
pub use error::{Error, Result};
pub use fem::{
    assemble_operators, build_uniform_mesh, discrete_eigen, fractional_norm, modal_coefficients,
    project_initial_data, prolongation_matrix, FemFunction, FemOperators, Mesh1D, ProjectionMode,
    SpectralBasis,
};
pub use harness::{
    builtin_experiment, emit_report, run_convergence_experiment, ExperimentConfig, ExperimentReport,
};
pub use noise::{
    build_noise_factor, derive_stream, CovarianceSpec, NoiseFactor, NoiseRng, StreamSpec,
};
pub use scheme::{
    build_stepper, drift_load, run_coupled_paths, run_path, CoupledPaths, Drift, RationalMethod,
    State, Stepper,
};
