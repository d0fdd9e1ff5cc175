//! SIDTHE epidemic model and scenario-based stochastic nonlinear MPC for
//! scheduling non-pharmaceutical interventions.
//!
//! - [`model`]: dynamics, RK4 integration, reproduction threshold and the
//!   frozen-S linear over-approximation.
//! - [`invariant`]: the positive invariant box and its robust version.
//! - [`scenario`]: parameter grids and scenario probabilities.
//! - [`ocp`]: condensed scenario OCP with an augmented Lagrangian solver.
//! - [`closed_loop`]: receding-horizon experiments.

pub mod closed_loop;
pub mod invariant;
pub mod model;
pub mod ocp;
pub mod scenario;

pub use closed_loop::{
    adverse_corner, run_batch, run_closed_loop, snapshot_predictions, ClosedLoopLog,
    ExperimentConfig, ExperimentError, PredictionCapture, ScenarioSettings,
};
pub use invariant::{
    contains, invariant_box, nagumo_boundary_check, robust_invariant_box, InvariantBox,
    NagumoReport, ParamsInterval,
};
pub use model::{
    overapprox_matrix, r0_inverse, rk4_step, sidthe_rhs, simulate, Compartment, ControlInput,
    ControlSchedule, MassRepair, ModelError, Params, State, Trajectory,
};
pub use ocp::{
    build_ocp, solve, Mode, NlpProblem, OcpConfig, OcpError, OcpSolution, SolveStatus,
    SolverOptions, StateBound, WarmStart,
};
pub use scenario::{grid_scenarios, params_interval, uniform_probabilities, Scenario, ScenarioSet};
