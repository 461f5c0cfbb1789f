//! Continuously monitored open quantum systems.
//!
//! Lindblad master equations, jump and diffusive quantum trajectories
//! (nonlinear, Kraus-form and linear/weighted), Markovian measurement
//! feedback, squeezed-thermal baths, Gaussian moment dynamics with LQG and
//! Markovian control, and a deterministic parallel ensemble runner.

pub mod diffusive;
pub mod ensemble;
pub mod error;
pub mod gaussian;
pub mod jump;
pub mod master;
pub mod ops;
pub mod rng;

pub use diffusive::{BathDetection, DiffusiveRecord, HomodyneFeedback};
pub use ensemble::{
    compare_to_me, reference_solution, run_ensemble, run_ensemble_with_threads, CompareOptions,
    ComparisonReport, EnsembleOutput, EnsembleSpec, EnsembleStats, GaussianScenario, Moment,
    Observable, PositivityPolicy, ReferenceSolution, Scenario, Storage, TrajectoryRecord,
    Unravelling,
};
pub use error::{Error, Result};
pub use gaussian::{
    Controller, FeedbackSpec, Gain, GaussianModel, GaussianState, RMatrix, RVector,
};
pub use jump::{JumpFeedback, JumpRecord, LinearScheme, WeightedState};
pub use master::{BathSpec, Channel, OpenSystemModel, Stepper, TimeGrid};
pub use ops::{
    build_standard_ops, c64, real, CMatrix, CVector, DensityMatrix, OperatorSet, StateVector,
    SystemKind, Tolerances, C64,
};
pub use rng::{NoiseMode, NoiseStream};
